"""Drive waveforms and the driven-oscillator quantities they determine.

A waveform is the tone sum ``f(t) = sum_j A_j cos(w_j t + theta_j)``.  Every
mode amplitude obeys ``g' + i nu g = nu f`` and the accumulated phase of mode
``l`` is ``D_l = int_0^T nu_l f(t) Im g_l(t) dt``.

Closed forms are written on the complex-exponential expansion of ``f``.  The
single and double time integrals reduce to first and second divided
differences of ``exp`` at imaginary nodes, which are evaluated without any
removable singularity, so tones exactly on a mode resonance or exactly
degenerate with each other are handled uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .errors import ResonantToneError, ValidationError

STATIC = "static"
OSCILLATING = "oscillating"
REGIMES = (STATIC, OSCILLATING)


@dataclass(frozen=True, eq=False)
class DriveWaveform:
    """Tone-sum envelope of the field gradient over ``[0, duration]``."""

    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    duration: float

    def __post_init__(self):
        arrays = []
        for name in ("amplitudes", "frequencies", "phases"):
            arr = np.atleast_1d(np.array(getattr(self, name), dtype=float))
            if arr.ndim != 1:
                raise ValidationError(f"{name} must be one-dimensional")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            arrays.append(arr)
        if len({a.size for a in arrays}) != 1:
            raise ValidationError("tone parameter arrays differ in length")
        if not self.duration > 0:
            raise ValidationError("duration must be positive")
        if np.any(self.frequencies < 0):
            raise ValidationError("tone frequencies must be non-negative")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValidationError("tone parameters must be finite")
        object.__setattr__(self, "duration", float(self.duration))

    @property
    def n_tones(self) -> int:
        return self.amplitudes.size

    @classmethod
    def from_quadratures(cls, x, frequencies, duration):
        """Build from ``x = (alpha, beta)`` with ``A cos(wt+th) = alpha cos wt - beta sin wt``."""
        x = np.asarray(x, dtype=float)
        k = x.size // 2
        alpha, beta = x[:k], x[k:]
        return cls(np.hypot(alpha, beta), frequencies, np.arctan2(beta, alpha), duration)

    def quadratures(self) -> np.ndarray:
        return np.concatenate([self.amplitudes * np.cos(self.phases),
                               self.amplitudes * np.sin(self.phases)])

    def scaled(self, factor: float) -> "DriveWaveform":
        return DriveWaveform(self.amplitudes * factor, self.frequencies, self.phases,
                             self.duration)

    def to_dict(self) -> dict:
        return {
            "duration": self.duration,
            "tones": [[float(a), float(w), float(p)] for a, w, p in
                      zip(self.amplitudes, self.frequencies, self.phases)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DriveWaveform":
        tones = np.asarray(data["tones"], dtype=float).reshape(-1, 3)
        return cls(tones[:, 0], tones[:, 1], tones[:, 2], data["duration"])

    def validate(self, tol: float = 1e-9) -> "DriveWaveform":
        """Raise ``ValidationError`` unless ``max |f| <= 1 + tol``."""
        peak = max_abs_f(self)
        if peak > 1 + tol:
            raise ValidationError(f"waveform envelope reaches |f| = {peak:.12g} > 1")
        return self


def zero_waveform(duration: float) -> DriveWaveform:
    return DriveWaveform([], [], [], duration)


def eval_f(waveform: DriveWaveform, t):
    """Envelope value(s) at time(s) ``t``."""
    t = np.asarray(t, dtype=float)
    arg = np.multiply.outer(t, waveform.frequencies) + waveform.phases
    return np.cos(arg) @ waveform.amplitudes


def _exponentials(waveform: DriveWaveform):
    """Coefficients ``c`` and rates ``k`` with ``f(t) = sum c exp(i k t)``."""
    half = 0.5 * waveform.amplitudes * np.exp(1j * waveform.phases)
    c = np.concatenate([half, half.conj()])
    k = np.concatenate([waveform.frequencies, -waveform.frequencies])
    return c, k


def quadrature_to_exponential(n_tones: int) -> np.ndarray:
    """Matrix ``U`` with ``c = U @ x`` for quadratures ``x = (alpha, beta)``."""
    eye = np.eye(n_tones)
    upper = np.hstack([0.5 * eye, 0.5j * eye])
    lower = np.hstack([0.5 * eye, -0.5j * eye])
    return np.vstack([upper, lower])


def dd1(theta):
    """``(exp(i theta) - 1) / (i theta)``, finite at ``theta = 0``."""
    theta = np.asarray(theta, dtype=float)
    return np.exp(0.5j * theta) * np.sinc(theta / (2 * np.pi))


_SERIES_TERMS = 24
_INV_FACT = np.array([1.0 / math.factorial(k + 2) for k in range(_SERIES_TERMS)])


def dd2(a, b):
    """Second divided difference of ``exp`` at nodes ``0, i a, i b``.

    Equals ``(1/T**2) int_0^T dt int_0^t dtau exp(i a' t + i b' tau)`` style
    simplex integrals after scaling.  Clusters of nodes (spread < 1) use the
    power series in complete homogeneous polynomials; otherwise the
    recurrence is applied across the widest-separated pair of nodes so the
    division never amplifies rounding error.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.empty(a.shape, dtype=complex)
    d_ab = np.abs(a - b)
    spread = np.maximum(np.maximum(np.abs(a), np.abs(b)), d_ab)
    small = spread < 1.0

    if np.any(small):
        x = 1j * a[small]
        y = 1j * b[small]
        h = np.ones_like(x)
        ypow = np.ones_like(y)
        acc = _INV_FACT[0] * h
        for k in range(1, _SERIES_TERMS):
            ypow = ypow * y
            h = x * h + ypow
            acc = acc + _INV_FACT[k] * h
        out[small] = acc

    big = ~small
    if np.any(big):
        ab, bb = a[big], b[big]
        aa, ba = np.abs(ab), np.abs(bb)
        dab = d_ab[big]
        res = np.empty(ab.shape, dtype=complex)
        # widest pair (0, ia): middle node ib
        m1 = (aa >= ba) & (aa >= dab)
        # widest pair (0, ib): middle node ia
        m2 = ~m1 & (ba >= dab)
        # widest pair (ia, ib): middle node 0
        m3 = ~(m1 | m2)

        def e1(p, q):  # first divided difference exp[i p, i q]
            return np.exp(1j * p) * dd1(q - p)

        if np.any(m1):
            p, q = ab[m1], bb[m1]
            res[m1] = (e1(q, p) - e1(0.0, q)) / (1j * p)
        if np.any(m2):
            p, q = ab[m2], bb[m2]
            res[m2] = (e1(p, q) - e1(0.0, p)) / (1j * q)
        if np.any(m3):
            p, q = ab[m3], bb[m3]
            res[m3] = (e1(0.0, q) - e1(p, 0.0)) / (1j * (q - p))
        out[big] = res
    return out


def _as_nu(chain_or_nu) -> np.ndarray:
    nu = getattr(chain_or_nu, "mode_frequencies", chain_or_nu)
    return np.atleast_1d(np.asarray(nu, dtype=float))


def regime_initial_condition(waveform: DriveWaveform, n_modes: int, regime: str):
    """``g_l(0)`` for a boundary regime: ``-i f(0)`` (static) or ``0`` (oscillating)."""
    if regime == STATIC:
        return np.full(n_modes, -1j * float(eval_f(waveform, 0.0)))
    if regime == OSCILLATING:
        return np.zeros(n_modes, dtype=complex)
    raise ValidationError(f"unknown boundary regime {regime!r}")


def check_resonance(waveform: DriveWaveform, nu, guard: float):
    """Raise ``ResonantToneError`` for the first tone within ``guard`` of a mode."""
    nu = _as_nu(nu)
    det = np.abs(waveform.frequencies[:, None] - nu[None, :])
    hits = np.argwhere(det <= guard)
    if hits.size:
        j, l = hits[0]
        raise ResonantToneError(int(j), int(l), float(det[j, l]))


def g_closed_form(waveform: DriveWaveform, nu: float, g0: complex, t):
    """Mode amplitude ``g(t) = e^{-i nu t} (g0 + nu int_0^t e^{i nu s} f(s) ds)``."""
    t = np.asarray(t, dtype=float)
    c, k = _exponentials(waveform)
    tt = t[..., None]
    integral = (c * tt * dd1((nu + k) * tt)).sum(axis=-1)
    return np.exp(-1j * nu * t) * (g0 + nu * integral)


def mode_amplitudes(waveform: DriveWaveform, chain_or_nu, g0=None, t=None):
    """All ``g_l(t)``; returns array of shape ``(len(t), N)``."""
    nu = _as_nu(chain_or_nu)
    g0 = np.zeros(nu.size, complex) if g0 is None else np.broadcast_to(g0, nu.shape)
    t = np.atleast_1d(np.asarray(waveform.duration if t is None else t, dtype=float))
    return np.stack([g_closed_form(waveform, n, g, t) for n, g in zip(nu, g0)], axis=-1)


def instantaneous_phases(waveform: DriveWaveform, chain_or_nu, g0=None, t=None):
    """``Phi_l(t) = nu_l f(t) Im g_l(t)`` on a time grid, shape ``(len(t), N)``."""
    nu = _as_nu(chain_or_nu)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    g = mode_amplitudes(waveform, nu, g0, t)
    return nu[None, :] * eval_f(waveform, t)[:, None] * g.imag


def accumulated_phases(waveform: DriveWaveform, chain_or_nu, g0=None, t=None) -> np.ndarray:
    """Phases ``D_l = int_0^t Phi_l`` (default ``t = T``) in closed form.

    ``g0`` is the vector of initial mode amplitudes; ``None`` means zero.  The
    homogeneous ``g0`` contribution is included exactly.
    """
    nu = _as_nu(chain_or_nu)
    T = waveform.duration if t is None else float(t)
    g0 = np.zeros(nu.size, complex) if g0 is None else np.broadcast_to(
        np.asarray(g0, dtype=complex), nu.shape)
    c, k = _exponentials(waveform)
    if c.size == 0:
        return np.zeros(nu.size)
    out = np.empty(nu.size)
    for l, (n, g) in enumerate(zip(nu, g0)):
        a = (k - n) * T
        hom = g * T * np.sum(c * dd1(a))
        kernel = dd2(a[:, None], (k[:, None] + k[None, :]) * T)
        part = n * T**2 * (c @ kernel @ c)
        out[l] = n * (hom + part).imag
    return out


def phase_history(waveform: DriveWaveform, chain_or_nu, g0=None, t=None) -> np.ndarray:
    """``D_l(t)`` for every time in ``t``; shape ``(len(t), N)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    rows = []
    for ti in t:
        if ti <= 0:
            rows.append(np.zeros(_as_nu(chain_or_nu).size))
        else:
            rows.append(accumulated_phases(waveform, chain_or_nu, g0, ti))
    return np.array(rows)


def boundary_residual_static(waveform: DriveWaveform, chain_or_nu) -> np.ndarray:
    """Static-gradient boundary system, ``[eqs a (all modes), eqs b (all modes)]``.

    With ``g_l(0) = -i f(0)`` the pair for mode ``l`` is
    ``-(Re, Im)(i g_l(T) - f(T))``, identical term by term to the tone-wise
    sums of the closed-form constraint system.
    """
    nu = _as_nu(chain_or_nu)
    T = waveform.duration
    g0 = regime_initial_condition(waveform, nu.size, STATIC)
    gT = mode_amplitudes(waveform, nu, g0, T)[0]
    r = -(1j * gT - eval_f(waveform, T))
    return np.concatenate([r.real, r.imag])


def boundary_residual_oscillating(waveform: DriveWaveform, chain_or_nu) -> np.ndarray:
    """Oscillating-gradient boundary system ``(Re, Im) int_0^T e^{i nu_l t} f(t) dt``.

    Zero iff ``g_l(T) = e^{-i nu_l T} g_l(0)`` with ``g_l(0) = 0``.  The pair for
    mode ``l`` has modulus ``|g_l(T)| / nu_l``.
    """
    nu = _as_nu(chain_or_nu)
    T = waveform.duration
    c, k = _exponentials(waveform)
    r = np.array([np.sum(c * T * dd1((n + k) * T)) for n in nu])
    return np.concatenate([r.real, r.imag])


def boundary_residual(waveform: DriveWaveform, chain_or_nu, regime: str) -> np.ndarray:
    if regime == STATIC:
        return boundary_residual_static(waveform, chain_or_nu)
    if regime == OSCILLATING:
        return boundary_residual_oscillating(waveform, chain_or_nu)
    raise ValidationError(f"unknown boundary regime {regime!r}")


def closure_defect(waveform: DriveWaveform, chain_or_nu, regime: str) -> np.ndarray:
    """Dimensionless per-mode boundary violation ``|i g(T) - f(T)|`` or ``|g(T)|``."""
    nu = _as_nu(chain_or_nu)
    g0 = regime_initial_condition(waveform, nu.size, regime)
    gT = mode_amplitudes(waveform, nu, g0, waveform.duration)[0]
    if regime == STATIC:
        return np.abs(1j * gT - eval_f(waveform, waveform.duration))
    return np.abs(gT)


# ----------------------------------------------------------------------------
# literal tone-by-tone formulas (static-regime initial condition)


def _sinc_ratio(x, T):
    """``sin(x T / 2) / x`` with its limit ``T / 2`` at ``x = 0``."""
    return 0.5 * T * np.sinc(x * T / (2 * np.pi))


def accumulated_phases_tonewise(waveform: DriveWaveform, chain_or_nu,
                                guard: float | None = None) -> np.ndarray:
    """Double tone sum for ``D_l`` with ``g_l(0) = -i f(0)``.

    Singular denominators ``omega_j^2 - nu_l^2`` and ``nu_l -/+ omega_k`` make
    this form unusable near resonance; any tone within ``guard`` (default
    ``1e-6 nu_1``) of a mode raises ``ResonantToneError``.
    """
    nu = _as_nu(chain_or_nu)
    guard = 1e-6 * nu[0] if guard is None else guard
    check_resonance(waveform, nu, guard)
    A, w, th = waveform.amplitudes, waveform.frequencies, waveform.phases
    T = waveform.duration
    wj, wk = w[:, None], w[None, :]
    tj, tk = th[:, None], th[None, :]
    out = np.empty(nu.size)
    for l, n in enumerate(nu):
        term1 = 2 * n**2 * (
            _sinc_ratio(wk - wj, T) * np.cos(tk - tj + (wk - wj) * T / 2)
            + _sinc_ratio(wk + wj, T) * np.cos(tk + tj + (wk + wj) * T / 2))
        term2 = -wj**2 * np.cos(tj) * (
            (np.sin((n + wk) * T + tk) - np.sin(tk)) / (n + wk)
            + (np.sin((n - wk) * T - tk) + np.sin(tk)) / (n - wk))
        term3 = wj * n * np.sin(tj) * (
            (np.cos(tk) - np.cos((n + wk) * T + tk)) / (n + wk)
            + (np.cos(tk) - np.cos((n - wk) * T - tk)) / (n - wk))
        pref = A[:, None] * A[None, :] / (2 * (wj**2 - n**2))
        out[l] = n * np.sum(pref * (term1 + term2 + term3))
    return out


def boundary_residual_static_tonewise(waveform: DriveWaveform, chain_or_nu,
                                      guard: float | None = None) -> np.ndarray:
    nu = _as_nu(chain_or_nu)
    guard = 1e-6 * nu[0] if guard is None else guard
    check_resonance(waveform, nu, guard)
    A, w, th, T = waveform.amplitudes, waveform.frequencies, waveform.phases, waveform.duration
    n = nu[:, None]
    pref = A * w / (w**2 - n**2)
    a = pref * (n * np.sin(n * T) * np.sin(th) + w * np.cos(w * T + th)
                - w * np.cos(n * T) * np.cos(th))
    b = pref * (n * np.cos(n * T) * np.sin(th) - n * np.sin(w * T + th)
                + w * np.sin(n * T) * np.cos(th))
    return np.concatenate([a.sum(axis=1), b.sum(axis=1)])


def boundary_residual_oscillating_tonewise(waveform: DriveWaveform, chain_or_nu,
                                           guard: float | None = None) -> np.ndarray:
    nu = _as_nu(chain_or_nu)
    guard = 1e-6 * nu[0] if guard is None else guard
    check_resonance(waveform, nu, guard)
    A, w, th, T = waveform.amplitudes, waveform.frequencies, waveform.phases, waveform.duration
    n = nu[:, None]
    pref = A / (w**2 - n**2)
    a = pref * (-w * np.sin(th) + w * np.cos(n * T) * np.sin(w * T + th)
                - n * np.sin(n * T) * np.cos(w * T + th))
    b = pref * (-n * np.cos(th) + n * np.cos(n * T) * np.cos(w * T + th)
                + w * np.sin(n * T) * np.sin(w * T + th))
    return np.concatenate([a.sum(axis=1), b.sum(axis=1)])


# ----------------------------------------------------------------------------
# envelope


def max_abs_f(waveform: DriveWaveform, points_per_period: int = 64) -> float:
    """``max |f(t)|`` on ``[0, T]`` by dense sampling plus bounded local refinement."""
    if waveform.n_tones == 0:
        return 0.0
    T = waveform.duration
    wmax = float(np.max(waveform.frequencies))
    n = max(int(np.ceil(points_per_period * wmax * T / (2 * np.pi))), 256) + 1
    t = np.linspace(0.0, T, n)
    vals = np.abs(eval_f(waveform, t))
    best = float(vals.max())
    # refine around local maxima within striking distance of the global one
    peaks = np.flatnonzero((vals >= np.roll(vals, 1)) & (vals >= np.roll(vals, -1)))
    peaks = peaks[vals[peaks] > best - 0.05 * max(best, 1e-300)]
    dt = t[1] - t[0]
    for i in peaks[:200]:
        lo, hi = max(0.0, t[i] - dt), min(T, t[i] + dt)
        if hi <= lo:
            continue
        r = minimize_scalar(lambda s: -abs(float(eval_f(waveform, s))), bounds=(lo, hi),
                            method="bounded", options={"xatol": 1e-12 * max(T, 1e-300)})
        best = max(best, -float(r.fun))
    return best


# ----------------------------------------------------------------------------
# numerical oracle


def integrate_modes(waveform: DriveWaveform, chain_or_nu, g0=None, t_eval=None,
                    rtol: float = 1e-12, atol: float = 1e-13):
    """Integrate ``g' = -i nu g + nu f`` and ``D' = nu f Im g`` with an adaptive RK8 scheme.

    Returns ``(t, g, D)`` with ``g`` and ``D`` of shape ``(len(t), N)``.
    Independent of the closed forms; used as their oracle.
    """
    nu = _as_nu(chain_or_nu)
    n = nu.size
    g0 = np.zeros(n, complex) if g0 is None else np.broadcast_to(
        np.asarray(g0, dtype=complex), (n,))
    T = waveform.duration
    t_eval = np.array([T]) if t_eval is None else np.asarray(t_eval, dtype=float)

    def rhs(t, y):
        g = y[:n] + 1j * y[n:2 * n]
        f = float(eval_f(waveform, t))
        dg = -1j * nu * g + nu * f
        return np.concatenate([dg.real, dg.imag, nu * f * g.imag])

    y0 = np.concatenate([g0.real, g0.imag, np.zeros(n)])
    wmax = max(float(np.max(waveform.frequencies, initial=0.0)), float(nu.max()))
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", t_eval=t_eval, rtol=rtol,
                    atol=atol, max_step=0.5 / wmax)
    y = sol.y.T
    return sol.t, y[:, :n] + 1j * y[:, n:2 * n], y[:, 2 * n:]


# ----------------------------------------------------------------------------
# fixed-spectrum linear/quadratic model used by the optimizer


@dataclass(frozen=True, eq=False)
class QuadraticModel:
    """Drive quantities as functions of quadratures at fixed frequencies and duration.

    ``boundary @ x`` is the dimensionless boundary residual (``2N`` entries:
    real parts then imaginary parts of ``i g(T) - f(T)`` or ``g(T)``), and
    ``x @ phase_forms[l] @ x`` is ``D_l``.
    """

    frequencies: np.ndarray
    duration: float
    nu: np.ndarray
    regime: str
    boundary: np.ndarray
    phase_forms: np.ndarray

    def phases(self, x):
        return np.einsum("i,lij,j->l", x, self.phase_forms, x)

    def phases_jacobian(self, x):
        return 2.0 * np.einsum("lij,j->li", self.phase_forms, x)


def quadratic_model(frequencies, duration: float, chain_or_nu, regime: str) -> QuadraticModel:
    nu = _as_nu(chain_or_nu)
    w = np.asarray(frequencies, dtype=float)
    K = w.size
    T = float(duration)
    U = quadrature_to_exponential(K)
    k = np.concatenate([w, -w])
    ones = np.ones(2 * K)
    b_rows = []
    forms = []
    for n in nu:
        first = T * dd1((n + k) * T)  # int_0^T e^{i(nu+k)s} ds
        if regime == OSCILLATING:
            row = n * np.exp(-1j * n * T) * first  # g(T), g0 = 0
        elif regime == STATIC:
            # i g(T) - f(T) with g0 = -i f(0)
            row = np.exp(-1j * n * T) * (ones + 1j * n * first) - np.exp(1j * k * T)
        else:
            raise ValidationError(f"unknown boundary regime {regime!r}")
        b_rows.append(row @ U)
        a = (k - n) * T
        P = n * T**2 * dd2(a[:, None], (k[:, None] + k[None, :]) * T)
        if regime == STATIC:
            P = P + np.outer(T * dd1(a), -1j * ones)
        M = n * (U.T @ P @ U).imag
        forms.append(0.5 * (M + M.T))
    B = np.array(b_rows)
    boundary = np.vstack([B.real, B.imag])
    return QuadraticModel(w, T, nu, regime, boundary, np.array(forms))
