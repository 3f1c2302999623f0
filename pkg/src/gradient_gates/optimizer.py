"""Drive synthesis: tone amplitudes, phases, frequencies and duration for a target.

At fixed frequencies and duration the boundary residual is linear and the
mode phases are quadratic in the tone quadratures, so both (and their
derivatives) come from a :class:`~gradient_gates.drive.QuadraticModel`.
Frequency derivatives use central differences of that model.

Each local solve has two stages:

1. weighted nonlinear least squares over quadratures (and optionally
   frequencies) of the boundary residual, the target mismatch and a hinge
   penalty on ``|f| > 1 - margin`` sampled on a dense grid;
2. a Newton polish at the final frequencies: quadratures are restricted to
   the null space of the boundary map and the target equations are solved
   with minimum-norm steps, which closes both residuals to rounding level
   when the first stage lands in the right basin.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import least_squares

from .drive import (OSCILLATING, REGIMES, DriveWaveform, accumulated_phases,
                    boundary_residual, max_abs_f, quadratic_model,
                    regime_initial_condition)
from .errors import ValidationError
from .synthesis import (_pair_design, iterative_decomposition, pair_vector,
                        single_segment_test, symmetric)


@dataclass
class SynthesisProblem:
    """Inputs of a single-segment drive synthesis.

    ``target`` is either a length-N phase vector ``D`` or an N x N coupling
    matrix; matrices are matched on their off-diagonal entries only.
    Durations are in seconds; ``duration`` pins ``T``, otherwise ``T`` is
    scanned downwards inside ``T_bounds`` (default 0.5 to 12 periods of the
    lowest mode).
    """

    chain: object
    target: np.ndarray
    boundary_regime: str = OSCILLATING
    n_tones: int | None = None
    T_bounds: tuple[float, float] | None = None
    duration: float | None = None
    duration_step: float = 0.1  # in periods of the lowest mode
    amplitude_bound: float = 1.0
    boundary_weight: float = 10.0
    target_weight: float = 1.0
    envelope_weight: float = 10.0
    envelope_margin: float = 1e-3
    rng_seed: int = 0
    multistart_count: int = 8
    tolerance: float = 1e-8
    frequency_mode: str = "harmonic"  # or "free"
    grid_density: float = 1.0
    frequency_range: tuple[float, float] = (0.3, 2.0)  # (x nu_1, x nu_N)
    resonance_guard: float = 0.02  # x nu_1
    max_nfev: int = 400
    samples_per_period: int = 24
    workers: int = 1

    def __post_init__(self):
        n = self.chain.n_ions
        self.target = np.asarray(self.target, dtype=float)
        if self.target.shape not in ((n,), (n, n)):
            raise ValidationError("target must be a length-N phase vector or an N x N matrix")
        if self.target.ndim == 2:
            self.target = symmetric(self.target)
        if self.frequency_mode not in ("harmonic", "free"):
            raise ValidationError(f"unknown frequency mode {self.frequency_mode!r}")
        if self.frequency_mode == "free" and self.n_tones is None:
            self.n_tones = 2 * n + 1
        if self.n_tones is not None and self.n_tones < 2 * n:
            raise ValidationError(f"need at least 2N = {2 * n} tones, got {self.n_tones}")
        if self.boundary_regime not in REGIMES:
            raise ValidationError(f"unknown boundary regime {self.boundary_regime!r}")
        if self.T_bounds is None:
            p = self.period
            self.T_bounds = (0.5 * p, 12.0 * p)
        lo, hi = self.T_bounds
        if not 0 < lo <= hi:
            raise ValidationError("T_bounds must be positive and ordered")
        if self.duration is not None and not self.duration > 0:
            raise ValidationError("duration must be positive")
        if self.amplitude_bound != 1.0:
            raise ValidationError("the envelope bound is fixed at |f| <= 1")

    @property
    def period(self) -> float:
        return 2 * np.pi / self.chain.mode_frequencies[0]

    @property
    def matrix_target(self) -> bool:
        return self.target.ndim == 2


@dataclass
class SynthesisResult:
    waveform: DriveWaveform
    achieved_D: np.ndarray
    boundary_residual_norm: float
    target_residual_norm: float
    converged: bool
    cost_history: list = field(default_factory=list)
    seed_used: int = 0
    peak_amplitude: float = 0.0
    scan: list = field(default_factory=list)
    wall_time: float = 0.0
    metadata: dict = field(default_factory=dict)

    def achieved_lambda(self, chain) -> np.ndarray:
        from .synthesis import lambda_from_phases

        return lambda_from_phases(chain.eta, self.achieved_D)

    def to_dict(self) -> dict:
        return {
            "waveform": self.waveform.to_dict(),
            "achieved_D": self.achieved_D.tolist(),
            "boundary_residual_norm": self.boundary_residual_norm,
            "target_residual_norm": self.target_residual_norm,
            "converged": self.converged,
            "seed_used": self.seed_used,
            "peak_amplitude": self.peak_amplitude,
            "scan": self.scan,
            "wall_time": self.wall_time,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthesisResult":
        return cls(DriveWaveform.from_dict(data["waveform"]), np.array(data["achieved_D"]),
                   data["boundary_residual_norm"], data["target_residual_norm"],
                   data["converged"], [], data["seed_used"], data["peak_amplitude"],
                   [tuple(e) for e in data.get("scan", [])], data.get("wall_time", 0.0),
                   data.get("metadata", {}))


def scale_tone_budget(problem: SynthesisProblem, factor: float) -> SynthesisProblem:
    """Copy of ``problem`` with ``round(factor * n_tones)`` tones (``n_tones`` defaults to 2N+1)."""
    if factor < 1:
        raise ValidationError("tone budget factor must be >= 1")
    base = problem.n_tones or 2 * problem.chain.n_ions + 1
    return replace(problem, n_tones=int(round(factor * base)))


# ----------------------------------------------------------------------------
# target handling


class _Target:
    """Residual map ``D -> r`` with Jacobian ``G`` (constant) and the Newton system."""

    def __init__(self, problem: SynthesisProblem):
        eta = problem.chain.eta
        if problem.matrix_target:
            test = single_segment_test(problem.target, eta)
            if not test.realizable:
                raise ValidationError(
                    "target is not realizable by a single drive; decompose it first")
            self.G = _pair_design(eta)
            self.value = pair_vector(problem.target)
            self.phases = _effort_minimal_phases(test.phases, eta, problem.chain.mode_frequencies)
        else:
            self.G = np.eye(eta.shape[0])
            self.value = problem.target.copy()
            self.phases = problem.target.copy()
        # independent equations for the polish stage
        U, sv, _ = np.linalg.svd(self.G, full_matrices=False)
        rank = int(np.sum(sv > 1e-12 * sv[0])) if sv.size and sv[0] > 0 else 0
        self.R = U[:, :rank].T @ self.G
        self.r_value = U[:, :rank].T @ self.value

    def residual(self, D):
        return self.G @ D - self.value


def _effort_minimal_phases(D0, eta, nu):
    """Member of ``D0 + t k`` (``k`` spans the off-diagonal kernel) minimizing ``sum |D_l| / nu_l``."""
    A = _pair_design(eta)
    if A.shape[0] == 0:
        return np.zeros_like(D0)
    _, sv, vt = np.linalg.svd(A)
    if sv.size == eta.shape[1] and sv[-1] > 1e-12 * sv[0]:
        return D0
    k = vt[-1]
    mask = np.abs(k) > 1e-14 * np.abs(k).max()
    # weighted median of the breakpoints -D0/k with weights |k|/nu
    bp = -D0[mask] / k[mask]
    w = np.abs(k[mask]) / nu[mask]
    order = np.argsort(bp)
    cw = np.cumsum(w[order])
    t = bp[order][np.searchsorted(cw, 0.5 * cw[-1])]
    D = D0 + t * k
    D[np.abs(D) < 1e-12 * np.abs(D).max()] = 0.0
    return D


# ----------------------------------------------------------------------------
# seeds


def _allowed_frequency(w, nu, guard):
    return np.min(np.abs(w - nu)) > guard


def _random_frequencies(rng, n, nu, lo, hi, guard):
    out = []
    while len(out) < n:
        w = rng.uniform(lo, hi)
        if _allowed_frequency(w, nu, guard):
            out.append(w)
    return np.array(out)


# ----------------------------------------------------------------------------
# frequency sets


def harmonic_grid(T, nu, lo, hi, guard, density=1.0, n_tones=None):
    """Harmonics ``n * 2 pi / (density T)`` inside ``[lo, hi]`` away from every mode.

    With ``n_tones`` the lowest ``n_tones`` admissible harmonics from ``lo``
    upwards are used (extending past ``hi`` when needed).  Returns the
    harmonic indices and frequencies.
    """
    spacing = 2 * np.pi / (density * T)
    n = max(1, int(math.ceil(lo / spacing)))
    idx = []
    while True:
        w = n * spacing
        if n_tones is None and w > hi:
            break
        if n_tones is not None and len(idx) >= n_tones:
            break
        if _allowed_frequency(w, nu, guard):
            idx.append(n)
        n += 1
        if n > 1_000_000:
            raise ValidationError("harmonic grid search runaway")
    idx = np.array(idx, dtype=int)
    return idx, idx * spacing


# ----------------------------------------------------------------------------
# local solves


@dataclass
class _Local:
    x: np.ndarray
    freqs: np.ndarray
    duration: float
    cost: float
    history: list


class _FixedSolver:
    """Solve for quadratures at fixed frequencies and duration.

    Quadratures are ``x = N y`` with ``N`` spanning the null space of the
    boundary map, so the boundary residual vanishes identically.  A hinge
    least-squares stage handles the envelope, then minimum-norm Newton steps
    close the (rank-reduced) target equations.
    """

    def __init__(self, problem: SynthesisProblem, target: _Target, freqs, T: float):
        self.p = problem
        self.target = target
        self.freqs = np.asarray(freqs, dtype=float)
        self.T = float(T)
        nu = problem.chain.mode_frequencies
        self.qm = quadratic_model(self.freqs, self.T, nu, problem.boundary_regime)
        self.N = null_space(self.qm.boundary)
        Q = np.einsum("ai,lij,jb->lab", self.N.T, self.qm.phase_forms, self.N)
        self.RQ = np.einsum("kl,lab->kab", target.R, Q)
        self.GQ = np.einsum("kl,lab->kab", target.G, Q)
        wmax = max(np.max(self.freqs), nu[-1])
        n = int(math.ceil(problem.samples_per_period * wmax * self.T / (2 * np.pi))) + 1
        ts = np.linspace(0.0, self.T, max(n, 200))
        W = np.outer(ts, self.freqs)
        self.F = np.hstack([np.cos(W), -np.sin(W)]) @ self.N
        self.history = []

    @property
    def dim(self) -> int:
        return self.N.shape[1]

    def project(self, x):
        return self.N.T @ x

    def peak(self, y) -> float:
        return float(np.max(np.abs(self.F @ y))) if y.size else 0.0

    def _residual(self, y):
        thr = 1.0 - self.p.envelope_margin
        f = self.F @ y
        r = np.concatenate([
            math.sqrt(self.p.target_weight) * (np.einsum("a,kab,b->k", y, self.GQ, y)
                                               - self.target.value),
            self.p.envelope_weight * np.maximum(0.0, np.abs(f) - thr),
        ])
        self.history.append(0.5 * float(r @ r))
        return r

    def _jac(self, y):
        thr = 1.0 - self.p.envelope_margin
        f = self.F @ y
        active = (np.abs(f) > thr) * np.sign(f)
        return np.vstack([
            math.sqrt(self.p.target_weight) * 2 * np.einsum("kab,b->ka", self.GQ, y),
            self.p.envelope_weight * active[:, None] * self.F,
        ])

    def newton(self, y, iters: int = 40):
        scale = max(1.0, float(np.linalg.norm(self.target.r_value)))
        best = (np.inf, y)
        for _ in range(iters):
            g = np.einsum("a,kab,b->k", y, self.RQ, y) - self.target.r_value
            err = float(np.linalg.norm(g))
            if err < best[0]:
                best = (err, y.copy())
            if err < 1e-15 * scale:
                break
            Jg = 2 * np.einsum("kab,b->ka", self.RQ, y)
            y = y - np.linalg.lstsq(Jg, g, rcond=None)[0]
        return best[1]

    def solve(self, y0) -> _Local:
        if self.dim == 0:
            raise ValidationError("boundary conditions leave no free quadratures")
        sol = least_squares(self._residual, y0, jac=self._jac, xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=self.p.max_nfev)
        y = self.newton(sol.x)
        r = self._residual(y)
        return _Local(self.N @ y, self.freqs, self.T, 0.5 * float(r @ r), self.history)


class _FreeObjective:
    """Weighted boundary + target + hinge residual over quadratures and frequencies."""

    def __init__(self, problem: SynthesisProblem, target: _Target, T: float, freqs0):
        self.p = problem
        self.target = target
        self.T = T
        self.K = len(freqs0)
        self.nu = problem.chain.mode_frequencies
        self.nu1 = self.nu[0]
        self.history = []
        wmax = 1.25 * max(np.max(freqs0), problem.frequency_range[1] * self.nu[-1])
        n = int(math.ceil(problem.samples_per_period * wmax * T / (2 * np.pi))) + 1
        self.ts = np.linspace(0.0, T, max(n, 200))

    def residual_x(self, x, freqs):
        qm = quadratic_model(freqs, self.T, self.nu, self.p.boundary_regime)
        W = np.outer(self.ts, freqs)
        f = np.cos(W) @ x[:self.K] - np.sin(W) @ x[self.K:]
        thr = 1.0 - self.p.envelope_margin
        return np.concatenate([
            math.sqrt(self.p.boundary_weight) * (qm.boundary @ x),
            math.sqrt(self.p.target_weight) * self.target.residual(qm.phases(x)),
            self.p.envelope_weight * np.maximum(0.0, np.abs(f) - thr),
        ])

    def jac_x(self, x, freqs):
        qm = quadratic_model(freqs, self.T, self.nu, self.p.boundary_regime)
        W = np.outer(self.ts, freqs)
        F = np.hstack([np.cos(W), -np.sin(W)])
        f = F @ x
        thr = 1.0 - self.p.envelope_margin
        active = (np.abs(f) > thr) * np.sign(f)
        return np.vstack([
            math.sqrt(self.p.boundary_weight) * qm.boundary,
            math.sqrt(self.p.target_weight) * (self.target.G @ qm.phases_jacobian(x)),
            self.p.envelope_weight * active[:, None] * F,
        ])

    def residual(self, z):
        r = self.residual_x(z[:2 * self.K], z[2 * self.K:] * self.nu1)
        self.history.append(0.5 * float(r @ r))
        return r

    def jac(self, z):
        x, u = z[:2 * self.K], z[2 * self.K:]
        freqs = u * self.nu1
        Jx = self.jac_x(x, freqs)
        Jw = np.empty((Jx.shape[0], self.K))
        for i in range(self.K):
            h = 1e-7 * max(1.0, abs(u[i]))
            fp, fm = freqs.copy(), freqs.copy()
            fp[i] += h * self.nu1
            fm[i] -= h * self.nu1
            Jw[:, i] = (self.residual_x(x, fp) - self.residual_x(x, fm)) / (2 * h)
        return np.hstack([Jx, Jw])

    def solve(self, x0, freqs0):
        z0 = np.concatenate([x0, np.asarray(freqs0) / self.nu1])
        lo = np.concatenate([np.full(2 * self.K, -np.inf), np.zeros(self.K)])
        z0 = np.maximum(z0, lo + 1e-12)
        sol = least_squares(self.residual, z0, jac=self.jac, bounds=(lo, np.inf),
                            x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=self.p.max_nfev)
        return sol.x[:2 * self.K], sol.x[2 * self.K:] * self.nu1


def _evaluate(problem, target, local: _Local) -> SynthesisResult:
    chain = problem.chain
    w = DriveWaveform.from_quadratures(local.x, local.freqs, local.duration)
    peak = max_abs_f(w)
    if peak > 1.0:
        # keep the returned waveform admissible; it cannot count as converged
        w = w.scaled(1.0 / peak)
    g0 = regime_initial_condition(w, chain.n_ions, problem.boundary_regime)
    D = accumulated_phases(w, chain, g0=g0)
    b = float(np.linalg.norm(boundary_residual(w, chain, problem.boundary_regime)))
    t = float(np.linalg.norm(target.residual(D)))
    ok = peak <= 1.0 + 1e-9 and b < problem.tolerance and t < problem.tolerance
    return SynthesisResult(w, D, b, t, bool(ok), list(local.history), problem.rng_seed,
                           min(peak, 1.0))


def _rank_key(res: SynthesisResult, idx: int):
    return (not res.converged, res.target_residual_norm + res.boundary_residual_norm, idx)


def _band(problem):
    nu = problem.chain.mode_frequencies
    return (problem.frequency_range[0] * nu[0], problem.frequency_range[1] * nu[-1],
            problem.resonance_guard * nu[0])


def _seed_quadratures(phases, nu, T, freqs):
    """Near-resonant tones on the given frequency set, one per mode carrying phase.

    A tone detuned by ``delta`` from mode ``l`` with amplitude ``a`` encloses
    ``D_l ~ sign(w - nu_l) pi a**2 nu_l**2 / (2 delta**2)`` per closed loop;
    the seed uses ``delta = 2 pi / T``.
    """
    K = freqs.size
    x = np.zeros(2 * K)
    scale = np.abs(phases).max() if phases.size else 0.0
    if scale == 0:
        return x
    for l in np.flatnonzero(np.abs(phases) > 1e-6 * scale):
        want = nu[l] + np.sign(phases[l]) * 2 * np.pi / T
        j = int(np.argmin(np.abs(freqs - want)))
        delta = max(abs(freqs[j] - nu[l]), 1e-3 * nu[0])
        x[j] += min(0.9, delta / nu[l] * math.sqrt(2 * abs(phases[l]) / np.pi))
    return x


class _HarmonicStrategy:
    def __init__(self, problem, target):
        self.p = problem
        self.target = target

    def grid(self, T):
        lo, hi, guard = _band(self.p)
        idx, freqs = harmonic_grid(T, self.p.chain.mode_frequencies, lo, hi, guard,
                                   self.p.grid_density, self.p.n_tones)
        if freqs.size < 2 * self.p.chain.n_ions:
            raise ValidationError(
                f"harmonic grid at T = {T:.3e} s has only {freqs.size} tones (< 2N)")
        return idx, freqs

    def attempt(self, T, streams, warm=None):
        idx, freqs = self.grid(T)
        solver = _FixedSolver(self.p, self.target, freqs, T)
        starts = []
        if warm is not None:
            w_idx, w_x = warm
            x = np.zeros(2 * freqs.size)
            pos = {n: i for i, n in enumerate(idx)}
            K0 = len(w_idx)
            for i, n in enumerate(w_idx):
                if n in pos:
                    x[pos[n]] = w_x[i]
                    x[freqs.size + pos[n]] = w_x[K0 + i]
            starts.append(solver.project(x))
        nu = self.p.chain.mode_frequencies
        for i, ss in enumerate(streams):
            rng = np.random.default_rng(ss)
            if i == 0 and warm is None:
                y = solver.project(_seed_quadratures(self.target.phases, nu, T, freqs))
                y = y + 0.01 * rng.standard_normal(y.size)
            else:
                y = rng.standard_normal(solver.dim)
                y *= 0.8 / max(solver.peak(y), 1e-300)
            starts.append(y)
        results = _run_starts(self.p, lambda y: _evaluate(self.p, self.target, solver.solve(y)),
                              starts)
        best = min(range(len(results)), key=lambda i: _rank_key(results[i], i))
        res = results[best]
        res.metadata = {"frequency_mode": "harmonic", "harmonics": idx.tolist(),
                        "start_index": best}
        x = res.waveform.quadratures()
        return res, (idx, x)


class _FreeStrategy:
    def __init__(self, problem, target):
        self.p = problem
        self.target = target

    def attempt(self, T, streams, warm=None):
        nu = self.p.chain.mode_frequencies
        lo, hi, guard = _band(self.p)
        K = self.p.n_tones or 2 * self.p.chain.n_ions + 1
        seeds = []
        if warm is not None:
            seeds.append(warm)
        for i, ss in enumerate(streams):
            rng = np.random.default_rng(ss)
            freqs = _random_frequencies(rng, K, nu, lo, hi, guard)
            if i == 0 and warm is None:
                targets = [nu[l] + np.sign(self.target.phases[l]) * 2 * np.pi / T
                           for l in np.argsort(-np.abs(self.target.phases))
                           if abs(self.target.phases[l]) > 0]
                freqs[:len(targets)] = np.abs(targets)[:K]
                x = _seed_quadratures(self.target.phases, nu, T, freqs)
                x += 0.01 * rng.standard_normal(x.size)
            else:
                x = rng.standard_normal(2 * K) * (0.5 / math.sqrt(K))
            seeds.append((x, freqs))

        def run(seed):
            obj = _FreeObjective(self.p, self.target, T, seed[1])
            x, freqs = obj.solve(*seed)
            solver = _FixedSolver(self.p, self.target, freqs, T)
            local = solver.solve(solver.project(x))
            local.history = obj.history + local.history
            return _evaluate(self.p, self.target, local)

        results = _run_starts(self.p, run, seeds)
        best = min(range(len(results)), key=lambda i: _rank_key(results[i], i))
        res = results[best]
        res.metadata = {"frequency_mode": "free", "start_index": best}
        w = res.waveform
        return res, (w.quadratures(), np.array(w.frequencies))


def _run_starts(problem, fn, starts):
    """Evaluate starts in order; sequential runs stop at the first converged start."""
    if problem.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(problem.workers) as pool:
            return list(pool.map(fn, starts))
    out = []
    for s in starts:
        out.append(fn(s))
        if out[-1].converged:
            break
    return out


def synthesize_waveform(problem: SynthesisProblem) -> SynthesisResult:
    """Find a drive realizing ``problem.target`` under the boundary regime.

    With a pinned duration this is a multistart local solve.  Otherwise the
    duration rises from the lower bound in steps of ``duration_step`` periods
    (multistart at every step) until a start converges, then decreases in
    quarter steps with warm starts until the first failure; the shortest
    converged waveform is returned.  ``scan`` lists ``(T, converged,
    residual)`` for every visited duration.
    """
    t_start = time.perf_counter()
    target = _Target(problem)
    if np.all(target.value == 0):
        T = problem.duration or problem.T_bounds[0]
        w = DriveWaveform([0.0], [problem.chain.mode_frequencies[0] * 0.5], [0.0], T)
        return SynthesisResult(w, np.zeros(problem.chain.n_ions), 0.0, 0.0, True, [0.0],
                               problem.rng_seed, 0.0, [], time.perf_counter() - t_start)
    if problem.frequency_mode == "harmonic":
        strategy = _HarmonicStrategy(problem, target)
    else:
        strategy = _FreeStrategy(problem, target)
    streams = np.random.SeedSequence(problem.rng_seed).spawn(problem.multistart_count)

    def record(T, r):
        scan.append((float(T), bool(r.converged),
                     float(r.target_residual_norm + r.boundary_residual_norm)))

    scan = []
    if problem.duration is not None:
        res, _ = strategy.attempt(problem.duration, streams)
        record(problem.duration, res)
        res.scan = scan
        res.wall_time = time.perf_counter() - t_start
        return res

    lo, hi = problem.T_bounds
    step = problem.duration_step * problem.period
    best = None
    n_steps = int(math.floor((hi - lo) / step * (1 + 1e-12)))
    for k in range(n_steps + 1):
        T = lo + k * step
        try:
            res, warm = strategy.attempt(T, streams)
        except ValidationError:
            # too short for 2N grid tones; longer durations may still work
            scan.append((float(T), False, float("inf")))
            continue
        record(T, res)
        if best is None or _rank_key(res, 0) < _rank_key(best, 0):
            best = res
        if res.converged:
            break
    if best is None:
        raise ValidationError("no duration in T_bounds admits 2N grid tones")
    if best.converged:
        fine = step / 4
        T0 = best.waveform.duration
        for k in range(1, 4):
            T = T0 - k * fine
            if T < lo * (1 - 1e-12):
                break
            try:
                trial, trial_warm = strategy.attempt(T, streams[:1], warm=warm)
            except ValidationError:
                break
            record(T, trial)
            if not trial.converged:
                break
            best, warm = trial, trial_warm
    best.scan = scan
    best.wall_time = time.perf_counter() - t_start
    return best


def synthesize_sequence(target, chain, boundary_regime: str = OSCILLATING,
                        max_segments: int = 4, pattern_candidates=None, **options):
    """Decompose ``target`` into spin-echo segments and synthesize each drive independently.

    ``options`` are forwarded to :class:`SynthesisProblem`.  Returns a
    :class:`~gradient_gates.sequence.GateSequence` of entangling segments plus
    the decomposition.
    """
    from .sequence import EntanglingSegment, GateSequence

    dec = iterative_decomposition(target, chain.eta, max_segments=max_segments,
                                  pattern_candidates=pattern_candidates)
    if not dec.converged:
        raise ValidationError(
            f"target could not be decomposed within {max_segments} segments "
            f"(residual {dec.residual:.3e})")
    segments = []
    for idx, (pattern, lam) in enumerate(zip(dec.patterns, dec.segment_lambdas())):
        problem = SynthesisProblem(chain, lam, boundary_regime, **options)
        try:
            res = synthesize_waveform(problem)
        except ValidationError as exc:
            raise ValidationError(f"segment {idx}: {exc}") from exc
        segments.append(EntanglingSegment(res.waveform, pattern, boundary_regime,
                                          target_lambda=lam, result=res))
    return GateSequence(list(segments)), dec
