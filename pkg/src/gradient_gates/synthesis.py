"""From mode phases to qubit couplings, and back.

Coupling matrices ``Lam`` follow the propagator convention
``U = exp(-i sum_{j != k} Lam[j, k] Z_j Z_k)``, so ``Lam = eta @ diag(D) @ eta.T``
for a segment with mode phases ``D``.  Diagonals are carried along but never
compared.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import ConfigurationError, SizeLimitError, SolverFailure, ValidationError
from .lp import simplex

MAX_PATTERN_IONS = 16


# ----------------------------------------------------------------------------
# small value types


@dataclass(frozen=True)
class SignPattern:
    """Pi-pulse pattern: ``-1`` on flipped ions, ``+1`` elsewhere."""

    signs: tuple[int, ...]

    def __post_init__(self):
        signs = tuple(int(s) for s in self.signs)
        if any(s not in (-1, 1) for s in signs):
            raise ValidationError("sign pattern entries must be +1 or -1")
        object.__setattr__(self, "signs", signs)

    @classmethod
    def identity(cls, n: int) -> "SignPattern":
        return cls((1,) * n)

    @classmethod
    def flip(cls, n: int, ions) -> "SignPattern":
        s = [1] * n
        for i in np.atleast_1d(ions):
            s[int(i)] = -1
        return cls(tuple(s))

    @property
    def n(self) -> int:
        return len(self.signs)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.signs, dtype=float)

    @property
    def flipped(self) -> list[int]:
        return [i for i, s in enumerate(self.signs) if s < 0]

    def canonical(self) -> "SignPattern":
        """Representative with ``s_1 = +1`` (global flip leaves couplings unchanged)."""
        return self if self.signs[0] > 0 else SignPattern(tuple(-s for s in self.signs))

    def __mul__(self, other: "SignPattern") -> "SignPattern":
        return SignPattern(tuple(a * b for a, b in zip(self.signs, other.signs)))

    def is_identity(self) -> bool:
        return all(s > 0 for s in self.signs)


@dataclass
class SegmentSchedule:
    """Static-gradient schedule: normalized time per sign pattern."""

    entries: list[tuple[SignPattern, float]]
    base_duration: float
    feasible: bool = True
    method: str = "lp"
    residual: float = 0.0

    def __post_init__(self):
        if any(w < 0 for _, w in self.entries):
            raise ValidationError("schedule weights must be non-negative")

    @property
    def total_weight(self) -> float:
        return float(sum(w for _, w in self.entries))

    @property
    def total_time(self) -> float:
        return self.base_duration * self.total_weight

    def to_dict(self) -> dict:
        return {
            "base_duration": self.base_duration,
            "total_time": self.total_time,
            "feasible": self.feasible,
            "method": self.method,
            "residual": self.residual,
            "segments": [{"pattern": list(p.signs), "weight": w} for p, w in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentSchedule":
        entries = [(SignPattern(tuple(e["pattern"])), float(e["weight"]))
                   for e in data["segments"]]
        return cls(entries, float(data["base_duration"]), bool(data["feasible"]),
                   data["method"], float(data["residual"]))


# ----------------------------------------------------------------------------
# matrix helpers


def pair_indices(n: int):
    return np.triu_indices(n, k=1)


def pair_vector(L) -> np.ndarray:
    """Upper-triangle couplings ordered (1,2), (1,3), ..., (N-1,N)."""
    L = np.asarray(L)
    return L[pair_indices(L.shape[0])]


def from_pair_vector(v, n: int) -> np.ndarray:
    L = np.zeros((n, n))
    iu = pair_indices(n)
    L[iu] = v
    return L + L.T


def off_diagonal(L) -> np.ndarray:
    L = np.array(L, dtype=float)
    np.fill_diagonal(L, 0.0)
    return L


def off_diagonal_norm(L) -> float:
    """Frobenius norm of the zero-diagonal part."""
    return float(np.linalg.norm(off_diagonal(L)))


def symmetric(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValidationError("interaction matrix must be square")
    return 0.5 * (L + L.T)


def lambda_from_phases(eta, D) -> np.ndarray:
    """``Lam[j, k] = sum_l eta[j, l] eta[k, l] D[l]``."""
    eta = np.asarray(eta, dtype=float)
    D = np.asarray(D, dtype=float)
    if eta.shape[1] != D.size:
        raise ValidationError("eta columns and phase vector differ in length")
    L = (eta * D) @ eta.T
    return 0.5 * (L + L.T)


def spin_echo_conjugate(L, pattern) -> np.ndarray:
    s = pattern.array if isinstance(pattern, SignPattern) else np.asarray(pattern, float)
    return np.asarray(L, dtype=float) * np.outer(s, s)


def compose_segments(segments) -> np.ndarray:
    """Total coupling ``sum_p O_p Lam_p O_p`` of ``(Lam_p, pattern_p)`` pairs."""
    segments = list(segments)
    if not segments:
        raise ValidationError("no segments to compose")
    n = np.asarray(segments[0][0]).shape[0]
    total = np.zeros((n, n))
    for L, pattern in segments:
        L = np.asarray(L, dtype=float)
        if L.shape != (n, n):
            raise ValidationError("segments have inconsistent sizes")
        total += spin_echo_conjugate(L, pattern)
    return total


def _pair_design(eta) -> np.ndarray:
    """``A[(jk), l] = eta[j, l] eta[k, l]`` so that ``pair_vector(eta D eta^T) = A @ D``."""
    eta = np.asarray(eta, dtype=float)
    j, k = pair_indices(eta.shape[0])
    return eta[j] * eta[k]


def _pair_signs(pattern: SignPattern) -> np.ndarray:
    s = pattern.array
    j, k = pair_indices(s.size)
    return s[j] * s[k]


# ----------------------------------------------------------------------------
# realizability and decomposition


@dataclass
class SingleSegmentTest:
    realizable: bool
    phases: np.ndarray
    off_diag_norm: float
    diagonality_defect: float


def _check_eta(eta):
    eta = np.asarray(eta, dtype=float)
    if eta.ndim != 2 or eta.shape[0] != eta.shape[1]:
        raise ConfigurationError("eta must be square")
    sv = np.linalg.svd(eta, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise ConfigurationError("eta is rank deficient")
    return eta


def single_segment_test(target, eta, rtol: float = 1e-10) -> SingleSegmentTest:
    """Can ``target`` be produced by one drive without pi-pulses?

    Solves for mode phases ``D`` matching every off-diagonal coupling in the
    least-squares sense (diagonal entries are free); ``off_diag_norm`` is the
    remaining mismatch.  ``diagonality_defect`` is the largest off-diagonal
    entry of ``eta.T @ target @ eta`` relative to its diagonal, which vanishes
    when the target (including its diagonal) is exactly of the form
    ``eta D eta.T``.
    """
    eta = _check_eta(eta)
    target = symmetric(target)
    n = eta.shape[0]
    scale = off_diagonal_norm(target)
    if n == 1 or scale == 0.0:
        return SingleSegmentTest(True, np.zeros(n), 0.0, 0.0)
    A = _pair_design(eta)
    D = np.linalg.lstsq(A, pair_vector(target), rcond=None)[0]
    resid = off_diagonal_norm(lambda_from_phases(eta, D) - target)
    rot = eta.T @ target @ eta
    diag_scale = max(np.max(np.abs(np.diag(rot))), 1e-300)
    defect = float(np.max(np.abs(off_diagonal(rot))) / diag_scale)
    return SingleSegmentTest(resid < rtol * scale, D, resid, defect)


def all_patterns(n: int) -> list[SignPattern]:
    """The ``2**(n-1)`` representatives with ``s_1 = +1``, in lexicographic order of ``(+1 < -1)``."""
    if n > MAX_PATTERN_IONS:
        raise SizeLimitError(f"pattern enumeration limited to N <= {MAX_PATTERN_IONS}")
    return [SignPattern((1,) + tail)
            for tail in itertools.product((1, -1), repeat=n - 1)]


def default_candidates(n: int, extra=None) -> list[SignPattern]:
    if n <= 12:
        cands = all_patterns(n)
    else:
        cands = [SignPattern.identity(n)] + [SignPattern.flip(n, i).canonical()
                                             for i in range(n)]
    for p in extra or []:
        p = p.canonical()
        if p not in cands:
            cands.append(p)
    return cands


@dataclass
class Decomposition:
    """Patterns and per-segment mode phases whose composition approximates a target."""

    patterns: list[SignPattern]
    phases: list[np.ndarray]
    eta: np.ndarray
    target: np.ndarray
    residual: float
    converged: bool
    metadata: dict = field(default_factory=dict)

    @property
    def n_segments(self) -> int:
        return len(self.patterns)

    def segment_lambdas(self) -> list[np.ndarray]:
        """Unconjugated ``eta D_p eta^T`` of every segment."""
        return [lambda_from_phases(self.eta, D) for D in self.phases]

    def composed(self) -> np.ndarray:
        return compose_segments(zip(self.segment_lambdas(), self.patterns))


def _joint_solve(A, target_vec, patterns, antisymmetric=False):
    n_modes = A.shape[1]
    if antisymmetric:
        # two segments, D_2 = -D_1, first unflipped
        design = A * (1.0 - _pair_signs(patterns[1]))[:, None]
    else:
        design = np.hstack([A * _pair_signs(p)[:, None] for p in patterns])
    sol = np.linalg.lstsq(design, target_vec, rcond=None)[0]
    resid = float(np.sqrt(2.0) * np.linalg.norm(design @ sol - target_vec))
    if antisymmetric:
        phases = [sol, -sol]
    else:
        phases = [sol[i * n_modes:(i + 1) * n_modes] for i in range(len(patterns))]
    return resid, phases


def iterative_decomposition(target, eta, max_segments: int = 4, pattern_candidates=None,
                            rtol: float = 1e-9) -> Decomposition:
    """Split ``target`` into spin-echo-dressed single-drive segments.

    Segment counts are tried in increasing order.  One segment uses no
    pulses.  Two segments fix the first pattern to the identity (all pattern
    pairs for ``N <= 7``) and solve jointly for both phase vectors, trying the
    mirrored form ``Lam_2 = -Lam_1`` first.  Beyond two segments the best
    pattern list is extended greedily one pattern at a time, re-solving all
    phase vectors jointly.  Candidates are ranked by off-diagonal residual;
    ties break on lexicographic pattern order.  An exhausted budget returns
    the best decomposition found with ``converged = False``.
    """
    if max_segments < 1:
        raise ValidationError("max_segments must be >= 1")
    eta = _check_eta(eta)
    target = symmetric(target)
    n = eta.shape[0]
    scale = off_diagonal_norm(target)
    tol = rtol * scale
    ident = SignPattern.identity(n)
    meta = {"tie_break": "lexicographic", "candidates_tried": 0}

    test = single_segment_test(target, eta, rtol=rtol)
    best = Decomposition([ident], [test.phases], eta, target, test.off_diag_norm,
                         test.off_diag_norm <= tol, dict(meta, stage=1))
    if best.converged or max_segments == 1:
        return best

    cands = [p.canonical() for p in (pattern_candidates or default_candidates(n))]
    A = _pair_design(eta)
    tv = pair_vector(target)
    non_identity = [p for p in cands if not p.is_identity()]

    # two segments
    ranked = []
    for idx, p in enumerate(non_identity):
        resid, phases = _joint_solve(A, tv, [ident, p], antisymmetric=True)
        ranked.append((resid > tol, 0, resid, idx, [ident, p], phases, "mirrored"))
    pair_list = [(ident, p) for p in non_identity]
    if n <= 7:
        pair_list = list(itertools.combinations_with_replacement(cands, 2))
    for idx, pats in enumerate(pair_list):
        if pats[0] == pats[1]:
            continue
        resid, phases = _joint_solve(A, tv, list(pats))
        ranked.append((resid > tol, 1, resid, idx, list(pats), phases, "joint"))
    meta["candidates_tried"] += len(ranked)
    ranked.sort(key=lambda r: (r[0], r[1] if not r[0] else 0, r[2] if r[0] else 0, r[3]))
    top = ranked[0]
    if top[2] < best.residual:
        best = Decomposition(top[4], top[5], eta, target, top[2], top[2] <= tol,
                             dict(meta, stage=2, form=top[6]))

    # greedy extension
    patterns = list(best.patterns)
    while not best.converged and len(patterns) < max_segments:
        trials = []
        for idx, p in enumerate(cands):
            resid, phases = _joint_solve(A, tv, patterns + [p])
            trials.append((resid, idx, p, phases))
        meta["candidates_tried"] += len(trials)
        resid, _, p, phases = min(trials, key=lambda r: (r[0] if r[0] > tol else 0.0, r[1]))
        patterns = patterns + [p]
        if resid < best.residual:
            best = Decomposition(list(patterns), phases, eta, target, resid, resid <= tol,
                                 dict(meta, stage=len(patterns), form="greedy"))
    return best


def pairwise_isolation(lam1, ion: int):
    """Two-segment construction coupling ``ion`` to every other ion only.

    Returns ``[(lam1, identity), (-lam1, flip(ion))]``; their composition has
    entries ``2 * lam1[ion, j]`` on row/column ``ion`` and zero elsewhere.
    """
    lam1 = symmetric(lam1)
    n = lam1.shape[0]
    return [(lam1, SignPattern.identity(n)), (-lam1, SignPattern.flip(n, ion))]


# ----------------------------------------------------------------------------
# static gradient with pi-pulses


def static_pattern_matrix(n: int):
    """Sign-product matrix ``C[(jk), alpha] = s_j s_k`` over the ``2**(n-1)`` patterns.

    Patterns fix ``s_1 = +1`` and are ordered by the binary counter
    ``(s_2 ... s_N)`` with ``-1`` as the low digit, which reproduces the
    textbook 4-ion layout.
    """
    if n < 2:
        raise ValidationError("need at least two ions")
    if n > MAX_PATTERN_IONS:
        raise SizeLimitError(f"pattern matrix limited to N <= {MAX_PATTERN_IONS}")
    patterns = [SignPattern((1,) + tail)
                for tail in itertools.product((-1, 1), repeat=n - 1)]
    C = np.array([_pair_signs(p) for p in patterns]).T
    return C, patterns


def static_lambda(chain, duration: float) -> np.ndarray:
    """Coupling matrix of a static gradient (``f = 1``) held for ``duration``."""
    nu = chain.mode_frequencies
    return lambda_from_phases(chain.eta, -nu * duration)


def static_min_time_schedule(chain, J: float, base_duration: float | None = None,
                             target=None) -> SegmentSchedule:
    """Shortest pi-pulse schedule realizing uniform couplings ``J`` with a static gradient.

    ``base_duration`` only sets the normalization of the weights (default one
    COM period); the physical total time does not depend on it.  An
    infeasible linear program falls back to non-negative least squares.
    """
    n = chain.n_ions
    T0 = 2 * np.pi / chain.mode_frequencies[0] if base_duration is None else base_duration
    C, patterns = static_pattern_matrix(n)
    L0 = pair_vector(static_lambda(chain, T0))
    if np.any(L0 == 0):
        raise ConfigurationError("a static coupling vanishes; targets undefined")
    tgt = np.full(L0.size, float(J)) if target is None else pair_vector(symmetric(target))
    lam = tgt / L0
    if np.all(lam == 0):
        return SegmentSchedule([], T0)
    res = simplex(np.ones(C.shape[1]), C, lam)
    if res.status == "optimal":
        w = res.x
        resid = float(np.linalg.norm(C @ w - lam))
        entries = [(p, float(x)) for p, x in zip(patterns, w) if x > 0]
        return SegmentSchedule(entries, T0, True, "lp", resid)
    if res.status != "infeasible":
        raise SolverFailure(f"static schedule LP ended with status {res.status}")
    w, rnorm = nnls(C, lam)
    entries = [(p, float(x)) for p, x in zip(patterns, w) if x > 0]
    return SegmentSchedule(entries, T0, False, "nnls", float(rnorm))


def schedule_lambda(chain, schedule: SegmentSchedule) -> np.ndarray:
    L0 = static_lambda(chain, schedule.base_duration)
    return compose_segments((w * L0, p) for p, w in schedule.entries)


# ----------------------------------------------------------------------------
# single-tone reference


@dataclass
class MonochromaticReference:
    frequency: float  # rad/s
    detuning: float  # rad/s, mode minus drive
    duration: float  # s
    predicted: np.ndarray  # RWA coupling magnitude matrix
    mode: int
    side: str = "red"

    @property
    def coupling_sign(self) -> int:
        """Sign of the realized coupling matrix relative to ``predicted``.

        A red-detuned tone yields ``-predicted`` in the convention
        ``exp(-i sum Lam ZZ)``; a blue-detuned tone yields ``+predicted``.
        """
        return -1 if self.side == "red" else 1

    @property
    def predicted_lambda(self) -> np.ndarray:
        return self.coupling_sign * self.predicted

    def waveform(self):
        from .drive import DriveWaveform

        return DriveWaveform([1.0], [self.frequency], [0.0], self.duration)


def monochromatic_reference(chain, J: float, mode: int = 0,
                            side: str = "red") -> MonochromaticReference:
    """Single tone detuned from ``mode`` for a loop-closing time ``2 pi / delta``.

    ``side="red"`` places the tone at ``nu_C - delta``, ``"blue"`` at
    ``nu_C + delta``; see :attr:`MonochromaticReference.coupling_sign`.

    In the rotating-wave picture a tone ``cos(w t)`` drives mode ``C`` with
    Rabi amplitude ``Omega_jC = eta_jC nu_C / 2`` and accumulates
    ``Lam_jk = 2 pi Omega_jC Omega_kC / delta**2`` over one loop.
    """
    n = chain.n_ions
    if not (mode == 0 or (n == 2 and mode == 1)):
        raise ConfigurationError(
            "uniform couplings need the COM mode (or the stretch mode of two ions)")
    if J <= 0:
        raise ValidationError("single-tone reference needs J > 0")
    if side not in ("red", "blue"):
        raise ValidationError(f"side must be 'red' or 'blue', got {side!r}")
    nu_c = chain.mode_frequencies[mode]
    eta_c = abs(chain.eta[0, mode])
    rabi = chain.eta[:, mode] * nu_c / 2
    delta = abs(rabi[0]) * np.sqrt(2 * np.pi / J)
    omega = nu_c - delta if side == "red" else nu_c + delta
    T = 2 * np.pi / delta
    predicted = 2 * np.pi * np.outer(rabi, rabi) / delta**2
    if side == "red":
        assert np.isclose(omega, nu_c * (1 - np.sqrt(np.pi / (2 * J)) * eta_c))
    return MonochromaticReference(omega, delta, T, predicted, mode, side)
