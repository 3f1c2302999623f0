"""Qubit-phonon state evolution and gate metrics.

States live in the interaction picture of ``sum_j w_j Z_j / 2 + sum_l nu_l a_l^+ a_l``;
local gates act instantaneously in that rotating frame.  In qubit sector
``s`` the coupling reduces to ``f(t) nu_l S_l (a_l^+ e^{i nu_l t} + a_l e^{-i nu_l t})``
with ``S_l = sum_j eta_jl s_j``, which is integrated on a truncated Fock space
without further approximation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .drive import (STATIC, closure_defect, eval_f, mode_amplitudes,
                    regime_initial_condition)
from .errors import CutoffError, FrameMismatchError, SizeLimitError, ValidationError
from .sequence import (EntanglingSegment, IdealSegment, LocalGate, apply_local, spins,
                       zz_phases)
from .synthesis import lambda_from_phases, off_diagonal

DEFAULT_CUTOFF = 8
MAX_ENUMERATION_IONS = 26


# ----------------------------------------------------------------------------
# states


@dataclass
class HybridState:
    """Amplitudes ``psi[s, n_1, ..., n_N]`` over qubit basis states and Fock numbers."""

    amplitudes: np.ndarray
    n_qubits: int

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape[0] != 2**self.n_qubits:
            raise ValidationError("leading axis must have 2**n_qubits entries")

    @property
    def cutoffs(self) -> tuple[int, ...]:
        return tuple(d - 1 for d in self.amplitudes.shape[1:])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @classmethod
    def product(cls, qubits, cutoffs, fock=None) -> "HybridState":
        """``|qubits> (x) |fock>``; ``qubits`` is a bitstring, index or 2**N vector."""
        cutoffs = tuple(int(c) for c in cutoffs)
        n_modes = len(cutoffs)
        if isinstance(qubits, str):
            n = len(qubits)
            q = np.zeros(2**n, dtype=complex)
            q[int(qubits, 2)] = 1.0
        else:
            q = np.asarray(qubits, dtype=complex)
            n = int(round(np.log2(q.size)))
        fock = (0,) * n_modes if fock is None else tuple(fock)
        if any(f > c for f, c in zip(fock, cutoffs)):
            raise ValidationError("Fock occupation exceeds cutoff")
        motion = np.zeros(tuple(c + 1 for c in cutoffs), dtype=complex)
        motion[fock] = 1.0
        return cls(np.multiply.outer(q / np.linalg.norm(q), motion), n)

    def with_cutoffs(self, cutoffs) -> "HybridState":
        new = np.zeros((self.amplitudes.shape[0],) + tuple(c + 1 for c in cutoffs), dtype=complex)
        sl = (slice(None),) + tuple(slice(0, min(a, b + 1))
                                    for a, b in zip(self.amplitudes.shape[1:], cutoffs))
        new[sl] = self.amplitudes[sl]
        return HybridState(new, self.n_qubits)

    def qubit_density_matrix(self) -> np.ndarray:
        m = self.amplitudes.reshape(self.amplitudes.shape[0], -1)
        return m @ m.conj().T

    def vacuum_amplitudes(self) -> np.ndarray:
        """Qubit amplitudes with every mode in its ground state."""
        return self.amplitudes[(slice(None),) + (0,) * (self.amplitudes.ndim - 1)].copy()

    def phonon_numbers(self) -> np.ndarray:
        p = np.abs(self.amplitudes) ** 2
        out = []
        for l in range(p.ndim - 1):
            axes = tuple(a for a in range(p.ndim) if a != l + 1)
            out.append(np.arange(p.shape[l + 1]) @ p.sum(axis=axes))
        return np.array(out)

    def top_level_population(self) -> np.ndarray:
        p = np.abs(self.amplitudes) ** 2
        out = []
        for l in range(p.ndim - 1):
            out.append(np.take(p, -1, axis=l + 1).sum())
        return np.array(out)

    def sector_displacements(self) -> np.ndarray:
        """``<a_l>`` conditioned on each qubit sector (zero for empty sectors)."""
        psi = self.amplitudes
        disp = np.zeros((psi.shape[0], psi.ndim - 1), dtype=complex)
        w = np.sum(np.abs(psi.reshape(psi.shape[0], -1)) ** 2, axis=1)
        for l in range(psi.ndim - 1):
            num = np.sum((np.conj(psi) * _lower(psi, l + 1)).reshape(psi.shape[0], -1), axis=1)
            disp[:, l] = np.where(w > 1e-300, num / np.maximum(w, 1e-300), 0.0)
        return disp


def thermal_fock_weights(nbar: float, tol: float = 1e-6):
    """Truncated Boltzmann weights ``p_n`` with trace deficit below ``tol``."""
    if nbar < 0:
        raise ValidationError("mean phonon number must be non-negative")
    if nbar == 0:
        return np.array([1.0])
    q = nbar / (1 + nbar)
    nmax = int(np.ceil(np.log(tol) / np.log(q)))
    p = (1 - q) * q ** np.arange(nmax + 1)
    return p


# ----------------------------------------------------------------------------
# Fock-space ladder operations along an axis


def _lower(psi, axis):
    """``a psi`` along ``axis``."""
    n = psi.shape[axis]
    out = np.zeros_like(psi)
    src = [slice(None)] * psi.ndim
    dst = [slice(None)] * psi.ndim
    src[axis] = slice(1, n)
    dst[axis] = slice(0, n - 1)
    shape = [1] * psi.ndim
    shape[axis] = n - 1
    out[tuple(dst)] = psi[tuple(src)] * np.sqrt(np.arange(1, n)).reshape(shape)
    return out


def _raise(psi, axis):
    n = psi.shape[axis]
    out = np.zeros_like(psi)
    src = [slice(None)] * psi.ndim
    dst = [slice(None)] * psi.ndim
    src[axis] = slice(0, n - 1)
    dst[axis] = slice(1, n)
    shape = [1] * psi.ndim
    shape[axis] = n - 1
    out[tuple(dst)] = psi[tuple(src)] * np.sqrt(np.arange(1, n)).reshape(shape)
    return out


def _displace(psi, beta_per_sector, axis):
    """Apply ``D(beta_s)`` on mode ``axis`` in every qubit sector ``s`` (axis 1)."""
    n = psi.shape[axis]
    a = np.diag(np.sqrt(np.arange(1, n)), 1)
    out = np.empty_like(psi)
    for s, beta in enumerate(beta_per_sector):
        M = expm(beta * a.T - np.conj(beta) * a)
        block = psi[:, s]
        out[:, s] = np.moveaxis(np.tensordot(M, block, axes=([1], [axis - 1])), 0, axis - 1)
    return out


# ----------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Sampled observables along a lab-frame evolution (batch size one)."""

    times: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    phonon_numbers: list = field(default_factory=list)
    top_population: list = field(default_factory=list)
    qubit_rho: list = field(default_factory=list)
    sector_displacements: list = field(default_factory=list)
    vacuum_amplitudes: list = field(default_factory=list)

    def record(self, t, state):
        if isinstance(state, np.ndarray):
            state = HybridState(state, int(round(np.log2(state.shape[0]))))
        st = state
        self.times.append(float(t))
        self.norms.append(st.norm)
        self.phonon_numbers.append(st.phonon_numbers())
        self.top_population.append(st.top_level_population())
        self.qubit_rho.append(st.qubit_density_matrix())
        self.vacuum_amplitudes.append(st.vacuum_amplitudes())
        self.sector_displacements.append(st.sector_displacements())

    def arrays(self) -> dict:
        return {k: np.array(v) for k, v in self.__dict__.items()}


# ----------------------------------------------------------------------------
# lab-frame integration


def _coupling_strengths(chain, pattern_signs=None):
    """``nu_l S_l(s)`` for every sector ``s`` (rows) and mode ``l`` (columns)."""
    s = spins(chain.n_ions).astype(float)
    return (s @ chain.eta) * chain.mode_frequencies


def estimate_cutoffs(sequence, chain, floor: int = DEFAULT_CUTOFF, samples: int = 400):
    """Per-mode Fock cutoffs from the closed-form peak displacement of every segment."""
    peak = np.zeros(chain.n_ions)
    smax = np.abs(chain.eta).sum(axis=0)
    for e in sequence:
        if isinstance(e, EntanglingSegment):
            t = np.linspace(0, e.duration, samples)
            g = mode_amplitudes(e.waveform, chain, g0=np.zeros(chain.n_ions, complex), t=t)
            extra = 0.0
            if e.regime == STATIC:
                extra = np.max(np.abs(eval_f(e.waveform, [0.0, e.duration])))
            peak = np.maximum(peak, (np.abs(g).max(axis=0) + extra) * smax)
    return tuple(int(max(floor, np.ceil(a**2 + 6 * a + 6))) for a in peak)


class _Integrator:
    def __init__(self, chain, rtol, atol, leakage_threshold):
        self.chain = chain
        self.rtol = rtol
        self.atol = atol
        self.threshold = leakage_threshold
        self.coupling = _coupling_strengths(chain)
        self.max_leak = np.zeros(chain.n_ions)

    def segment(self, psi, seg: EntanglingSegment, t0, trajectory=None, n_samples=0):
        """Evolve batch ``psi[b, s, modes...]`` through one drive segment."""
        w = seg.waveform
        nu = self.chain.mode_frequencies
        shape = psi.shape
        coup = self.coupling.T.reshape((self.chain.n_ions, 1, shape[1]) + (1,) * (len(shape) - 2))
        if seg.regime == STATIC:
            psi = self._dress(psi, seg, 0.0, t0, inverse=True)

        def rhs(t, y):
            p = y.reshape(shape)
            out = np.zeros_like(p)
            for l in range(self.chain.n_ions):
                ph = np.exp(1j * nu[l] * (t0 + t))
                out += coup[l] * (ph * _raise(p, l + 2) + np.conj(ph) * _lower(p, l + 2))
            out *= -1j * eval_f(w, t)
            return out.ravel()

        wmax = max(np.max(w.frequencies, initial=0.0) + nu[-1], nu[-1])
        t_eval = np.linspace(0, w.duration, n_samples) if n_samples else [w.duration]
        sol = solve_ivp(rhs, (0.0, w.duration), psi.ravel(), method="DOP853", rtol=self.rtol,
                        atol=self.atol, max_step=0.5 / wmax, t_eval=t_eval)
        if not sol.success:
            raise CutoffError(f"integration failed: {sol.message}")
        if n_samples:
            for k, t in enumerate(sol.t):
                p = sol.y[:, k].reshape(shape)
                self._leak(p)
                if trajectory is not None:
                    trajectory.record(t0 + t, p[0])
        out = sol.y[:, -1].reshape(shape)
        self._leak(out)
        if seg.regime == STATIC:
            out = self._dress(out, seg, w.duration, t0, inverse=False)
        return out

    def _dress(self, psi, seg, t, t0, inverse):
        """Static frame: ``U_P(t)`` (or its inverse at the start) in the rotating frame."""
        nu = self.chain.mode_frequencies
        g = mode_amplitudes(seg.waveform, self.chain,
                            g0=regime_initial_condition(seg.waveform, self.chain.n_ions, STATIC),
                            t=[t])[0]
        S = spins(self.chain.n_ions) @ self.chain.eta
        for l in range(self.chain.n_ions):
            beta = 1j * g[l] * S[:, l] * np.exp(1j * nu[l] * (t0 + t))
            psi = _displace(psi, -beta if inverse else beta, l + 2)
        return psi

    def _leak(self, p):
        probs = np.abs(p) ** 2
        for l in range(self.chain.n_ions):
            self.max_leak[l] = max(self.max_leak[l], float(np.take(probs, -1, axis=l + 2).sum()))


def _run(sequence, chain, psi, rtol, atol, leakage_threshold, trajectory=None, n_samples=0):
    n = chain.n_ions
    integ = _Integrator(chain, rtol, atol, leakage_threshold)
    t = 0.0
    if trajectory is not None:
        trajectory.record(t, psi[0])
    for e in sequence:
        if isinstance(e, LocalGate):
            psi = apply_local(psi, e, n, axis=1)
        elif isinstance(e, IdealSegment):
            ph = np.exp(-1j * zz_phases(e.effective_lambda(), n))
            psi = psi * ph.reshape((1, -1) + (1,) * (psi.ndim - 2))
        elif isinstance(e, EntanglingSegment):
            flips = [LocalGate("RX", i, np.pi) for i in e.pattern.flipped]
            for g in flips:
                psi = apply_local(psi, g, n, axis=1)
            psi = integ.segment(psi, e, t, trajectory, n_samples)
            for g in flips:
                psi = apply_local(psi, LocalGate("RX", g.targets[0], -np.pi), n, axis=1)
            t += e.duration
        else:
            raise ValidationError(f"unsupported sequence element {type(e).__name__}")
    return psi, integ.max_leak


# ----------------------------------------------------------------------------
# factorized (branch) representation
#
# Conditioned on a qubit sector the coupling drives every mode independently,
# and local gates act on the qubits only.  Any state reachable from a product
# motional input is therefore a finite sum of terms |q_b> (x) prod_l |m_lb>.


def _ladder_mean(M, op):
    """``<m_b'| op |m_b>`` for all branch pairs; ``M`` is (branches, levels)."""
    n = M.shape[1]
    if op == "a":
        AM = np.zeros_like(M)
        AM[:, :-1] = M[:, 1:] * np.sqrt(np.arange(1, n))
    elif op == "n":
        AM = M * np.arange(n)
    elif op == "top":
        AM = np.zeros_like(M)
        AM[:, -1] = M[:, -1]
    else:
        AM = M
    return M.conj() @ AM.T


@dataclass
class BranchState:
    """``sum_b |q_b> (x) |m_1b> (x) ... (x) |m_Nb>``.

    ``qubits`` has shape (branches, 2**n); ``modes[l]`` has shape
    (branches, cutoff_l + 1).  ``tags`` labels the input each branch descends
    from (used for batched fidelity runs).
    """

    qubits: np.ndarray
    modes: list
    n_qubits: int
    tags: np.ndarray | None = None

    def __post_init__(self):
        self.qubits = np.atleast_2d(np.asarray(self.qubits, dtype=complex))
        self.modes = [np.atleast_2d(np.asarray(m, dtype=complex)) for m in self.modes]
        if self.qubits.shape[1] != 2**self.n_qubits:
            raise ValidationError("qubit factors must have 2**n_qubits entries")
        if self.tags is None:
            self.tags = np.zeros(self.qubits.shape[0], dtype=int)

    @classmethod
    def product(cls, qubits, cutoffs, fock=None) -> "BranchState":
        dense = HybridState.product(qubits, (0,) * len(cutoffs))
        q = dense.amplitudes.reshape(-1)
        fock = (0,) * len(cutoffs) if fock is None else tuple(fock)
        if any(f > c for f, c in zip(fock, cutoffs)):
            raise ValidationError("Fock occupation exceeds cutoff")
        modes = []
        for f, c in zip(fock, cutoffs):
            m = np.zeros((1, int(c) + 1), dtype=complex)
            m[0, f] = 1.0
            modes.append(m)
        return cls(q[None], modes, dense.n_qubits)

    @property
    def n_branches(self) -> int:
        return self.qubits.shape[0]

    @property
    def cutoffs(self) -> tuple[int, ...]:
        return tuple(m.shape[1] - 1 for m in self.modes)

    def with_cutoffs(self, cutoffs) -> "BranchState":
        modes = []
        for m, c in zip(self.modes, cutoffs):
            new = np.zeros((m.shape[0], c + 1), dtype=complex)
            k = min(m.shape[1], c + 1)
            new[:, :k] = m[:, :k]
            modes.append(new)
        return BranchState(self.qubits.copy(), modes, self.n_qubits, self.tags.copy())

    def _overlaps(self, special=None, op=None):
        G = np.ones((self.n_branches, self.n_branches), dtype=complex)
        for l, m in enumerate(self.modes):
            G *= _ladder_mean(m, op if l == special else "id")
        return G

    @property
    def norm(self) -> float:
        QQ = self.qubits.conj() @ self.qubits.T
        return float(np.sqrt(max(np.real(np.sum(QQ * self._overlaps())), 0.0)))

    def qubit_density_matrix(self) -> np.ndarray:
        return self.qubits.T @ self._overlaps().T @ self.qubits.conj()

    def vacuum_amplitudes(self) -> np.ndarray:
        w = np.ones(self.n_branches, dtype=complex)
        for m in self.modes:
            w *= m[:, 0]
        return w @ self.qubits

    def _mode_expectation(self, op):
        QQ = self.qubits.conj() @ self.qubits.T
        return np.array([np.real(np.sum(QQ * self._overlaps(l, op)))
                         for l in range(len(self.modes))])

    def phonon_numbers(self) -> np.ndarray:
        return self._mode_expectation("n")

    def top_level_population(self) -> np.ndarray:
        return self._mode_expectation("top")

    def sector_displacements(self) -> np.ndarray:
        """``<a_l>`` conditioned on each qubit sector (zero for empty sectors)."""
        Q = self.qubits
        w = np.real(np.einsum("ps,bs,pb->s", Q.conj(), Q, self._overlaps()))
        out = np.zeros((Q.shape[1], len(self.modes)), dtype=complex)
        for l in range(len(self.modes)):
            num = np.einsum("ps,bs,pb->s", Q.conj(), Q, self._overlaps(l, "a"))
            out[:, l] = np.where(w > 1e-300, num / np.maximum(w, 1e-300), 0.0)
        return out

    def to_dense(self, max_size: int = 2**26) -> HybridState:
        size = 2**self.n_qubits * int(np.prod([c + 1 for c in self.cutoffs]))
        if size > max_size:
            raise SizeLimitError(f"dense state with {size} amplitudes exceeds {max_size}")
        psi = np.zeros((2**self.n_qubits,) + tuple(c + 1 for c in self.cutoffs), dtype=complex)
        for b in range(self.n_branches):
            term = self.qubits[b]
            for m in self.modes:
                term = np.multiply.outer(term, m[b])
            psi += term
        return HybridState(psi, self.n_qubits)

    def overlap(self, other: "BranchState") -> complex:
        """``<self|other>`` (cutoffs must agree)."""
        G = np.ones((self.n_branches, other.n_branches), dtype=complex)
        for a, b in zip(self.modes, other.modes):
            G *= a.conj() @ b.T
        return complex(np.sum((self.qubits.conj() @ other.qubits.T) * G))

    def apply_local(self, gate) -> "BranchState":
        q = apply_local(self.qubits, gate, self.n_qubits, axis=1)
        return BranchState(q, self.modes, self.n_qubits, self.tags)

    def split_sectors(self, tol: float = 0.0) -> tuple["BranchState", np.ndarray]:
        """One branch per (branch, occupied sector); returns the new state and sectors."""
        b_idx, s_idx = np.nonzero(np.abs(self.qubits) > tol)
        q = np.zeros((b_idx.size, self.qubits.shape[1]), dtype=complex)
        q[np.arange(b_idx.size), s_idx] = self.qubits[b_idx, s_idx]
        modes = [m[b_idx] for m in self.modes]
        return BranchState(q, modes, self.n_qubits, self.tags[b_idx]), s_idx

    def merged(self, decimals: int = 13) -> "BranchState":
        """Combine branches with equal tags and (rounded) motional factors."""
        groups: dict = {}
        for b in range(self.n_branches):
            key = (int(self.tags[b]),) + tuple(
                np.round(np.concatenate([m[b].real, m[b].imag]), decimals).tobytes()
                for m in self.modes)
            groups.setdefault(key, []).append(b)
        first = [g[0] for g in groups.values()]
        q = np.array([self.qubits[g].sum(axis=0) for g in groups.values()])
        return BranchState(q, [m[first] for m in self.modes], self.n_qubits, self.tags[first])


def _branch_segment(state: BranchState, seg, chain, t0, rtol, atol, monitor_points,
                    trajectory=None, n_samples=0):
    """Evolve every (branch, sector) pair's motional factors through one segment."""
    st, sectors = state.split_sectors()
    n = chain.n_ions
    nu = chain.mode_frequencies
    S = spins(n) @ chain.eta  # (sectors, modes)
    w = seg.waveform
    if seg.regime == STATIC:
        st = _branch_dress(st, sectors, seg, chain, 0.0, t0, inverse=True)
    dims = [m.shape[1] for m in st.modes]
    offsets = np.concatenate([[0], np.cumsum([st.n_branches * d for d in dims])])
    strength = [(nu[l] * S[sectors, l])[:, None] for l in range(n)]
    sq = [np.sqrt(np.arange(1, d)) for d in dims]

    def rhs(t, y):
        out = np.empty_like(y)
        f = eval_f(w, t)
        for l in range(n):
            m = y[offsets[l]:offsets[l + 1]].reshape(st.n_branches, dims[l])
            ph = np.exp(1j * nu[l] * (t0 + t))
            r = np.zeros_like(m)
            r[:, 1:] += ph * m[:, :-1] * sq[l]
            r[:, :-1] += np.conj(ph) * m[:, 1:] * sq[l]
            out[offsets[l]:offsets[l + 1]] = (-1j * f * strength[l] * r).ravel()
        return out

    y0 = np.concatenate([m.ravel() for m in st.modes])
    wmax = max(np.max(w.frequencies, initial=0.0) + nu[-1], nu[-1])
    n_eval = max(n_samples, monitor_points)
    t_eval = np.linspace(0.0, w.duration, n_eval)
    sol = solve_ivp(rhs, (0.0, w.duration), y0, method="DOP853", rtol=rtol, atol=atol,
                    max_step=0.5 / wmax, t_eval=t_eval)
    if not sol.success:
        raise CutoffError(f"integration failed: {sol.message}")
    weight = np.sum(np.abs(st.qubits) ** 2, axis=1)
    weight = weight / max(weight.sum(), 1e-300)
    leak = np.zeros(n)
    for l in range(n):
        blk = sol.y[offsets[l]:offsets[l + 1]].reshape(st.n_branches, dims[l], -1)
        leak[l] = float(np.max(weight @ np.abs(blk[:, -1, :]) ** 2))

    def state_at(k):
        modes = [sol.y[offsets[l]:offsets[l + 1], k].reshape(st.n_branches, dims[l])
                 for l in range(n)]
        return BranchState(st.qubits, modes, st.n_qubits, st.tags)

    if trajectory is not None and n_samples:
        for k, t in enumerate(sol.t):
            trajectory.record(t0 + t, state_at(k))
    out = state_at(-1)
    if seg.regime == STATIC:
        out = _branch_dress(out, sectors, seg, chain, w.duration, t0, inverse=False)
    return out, leak


def _branch_dress(st, sectors, seg, chain, t, t0, inverse):
    nu = chain.mode_frequencies
    g = mode_amplitudes(seg.waveform, chain,
                        g0=regime_initial_condition(seg.waveform, chain.n_ions, STATIC), t=[t])[0]
    S = spins(chain.n_ions) @ chain.eta
    modes = []
    for l, m in enumerate(st.modes):
        beta = 1j * g[l] * S[sectors, l] * np.exp(1j * nu[l] * (t0 + t))
        modes.append(_displace_rows(m, -beta if inverse else beta))
    return BranchState(st.qubits, modes, st.n_qubits, st.tags)


def _displace_rows(M, betas):
    """Apply ``D(beta_b)`` to row ``b`` of ``M``."""
    n = M.shape[1]
    a = np.diag(np.sqrt(np.arange(1, n)), 1)
    out = np.empty_like(M)
    for b, beta in enumerate(betas):
        out[b] = expm(beta * a.T - np.conj(beta) * a) @ M[b]
    return out


def _run_branches(sequence, chain, state: BranchState, rtol, atol, trajectory=None,
                  n_samples=0, monitor_points=65):
    n = chain.n_ions
    leak = np.zeros(n)
    t = 0.0
    if trajectory is not None:
        trajectory.record(t, state)
    for e in sequence:
        if isinstance(e, LocalGate):
            state = state.apply_local(e)
        elif isinstance(e, IdealSegment):
            ph = np.exp(-1j * zz_phases(e.effective_lambda(), n))
            state = BranchState(state.qubits * ph, state.modes, n, state.tags)
        elif isinstance(e, EntanglingSegment):
            for i in e.pattern.flipped:
                state = state.apply_local(LocalGate("RX", i, np.pi))
            state, lk = _branch_segment(state, e, chain, t, rtol, atol, monitor_points,
                                        trajectory, n_samples)
            leak = np.maximum(leak, lk)
            for i in e.pattern.flipped:
                state = state.apply_local(LocalGate("RX", i, -np.pi))
            state = state.merged()
            t += e.duration
        else:
            raise ValidationError(f"unsupported sequence element {type(e).__name__}")
    return state, leak


def _raised(cutoffs, leak, threshold):
    return tuple(c if lk <= threshold else int(np.ceil(c * 1.5)) + 2
                 for c, lk in zip(cutoffs, leak))


def evolve_lab_frame(sequence, chain, initial, rtol: float = 1e-10, atol: float = 1e-12,
                     leakage_threshold: float = 1e-6, auto_raise: bool = True,
                     n_samples: int = 0, max_raises: int = 3, method: str = "auto"):
    """Integrate the full qubit-phonon dynamics through ``sequence``.

    ``method="branch"`` evolves a :class:`BranchState` (exact for product
    motional inputs, cost linear in the cutoffs); ``"dense"`` integrates the
    full tensor-product amplitude array of a :class:`HybridState`.  ``"auto"``
    follows the type of ``initial``.

    Returns ``(final_state, trajectory, info)``; ``trajectory`` is sampled at
    ``n_samples`` points per segment (``None`` when zero).  If any mode's top
    Fock level exceeds ``leakage_threshold`` the cutoffs are raised (up to
    ``max_raises`` times, with a warning) or :class:`CutoffError` is raised.
    """
    if method == "auto":
        method = "branch" if isinstance(initial, BranchState) else "dense"
    if method == "branch" and isinstance(initial, HybridState):
        raise ValidationError("branch evolution needs a BranchState input")
    if method == "dense" and isinstance(initial, BranchState):
        initial = initial.to_dense()
    if method not in ("branch", "dense"):
        raise ValidationError(f"unknown evolution method {method!r}")
    state = initial
    if state.n_qubits != chain.n_ions:
        raise ValidationError("state and chain sizes differ")
    for attempt in range(max_raises + 1):
        traj = Trajectory() if n_samples else None
        if method == "branch":
            final, leak = _run_branches(sequence, chain, state, rtol, atol, traj, n_samples)
        else:
            psi, leak = _run(sequence, chain, state.amplitudes[None], rtol, atol,
                             leakage_threshold, traj, n_samples)
            final = HybridState(psi[0], state.n_qubits)
        if np.all(leak <= leakage_threshold):
            drift = abs(final.norm - initial.norm)
            info = {"cutoffs": state.cutoffs, "max_top_population": leak.tolist(),
                    "norm_drift": drift, "raised": attempt, "method": method}
            return final, traj, info
        if not auto_raise or attempt == max_raises:
            raise CutoffError(f"Fock cutoffs {state.cutoffs} leak {leak.max():.2e} "
                              f"> {leakage_threshold:.1e}; raise n_max")
        new = _raised(state.cutoffs, leak, leakage_threshold)
        warnings.warn(f"raising Fock cutoffs {state.cutoffs} -> {new} after leakage "
                      f"{leak.max():.2e}", RuntimeWarning, stacklevel=2)
        state = state.with_cutoffs(new)
    raise AssertionError("unreachable")


# ----------------------------------------------------------------------------
# polaron-frame propagation


def evolve_polaron_frame(sequence, chain, initial: HybridState, boundary_tol: float = 1e-6):
    """Apply every segment's closed-form propagator.

    A closed segment multiplies qubit sector ``s`` by
    ``exp(-i sum_l D_l S_l^2)``.  States crossing a static-regime segment are
    read in the dressed basis of the static gradient (as in
    :func:`evolve_lab_frame`), so no displacement appears.  Segments whose
    boundary residual exceeds ``boundary_tol`` raise :class:`FrameMismatchError`.
    """
    if isinstance(initial, BranchState):
        return _polaron_branches(sequence, chain, initial, boundary_tol)
    n = chain.n_ions
    psi = initial.amplitudes[None].copy()
    for e in sequence:
        if isinstance(e, LocalGate):
            psi = apply_local(psi, e, n, axis=1)
        elif isinstance(e, IdealSegment):
            ph = np.exp(-1j * zz_phases(e.effective_lambda(), n))
            psi = psi * ph.reshape((1, -1) + (1,) * (psi.ndim - 2))
        elif isinstance(e, EntanglingSegment):
            defect = closure_defect(e.waveform, chain, e.regime)
            if np.max(defect) > boundary_tol:
                raise FrameMismatchError(
                    f"segment boundary residual {np.max(defect):.2e} exceeds {boundary_tol:.1e}")
            flips = [LocalGate("RX", i, np.pi) for i in e.pattern.flipped]
            for g in flips:
                psi = apply_local(psi, g, n, axis=1)
            lam = e.lambda_matrix(chain)
            ph = np.exp(-1j * (zz_phases(lam, n) + np.sum(np.diag(lam))))
            psi = psi * ph.reshape((1, -1) + (1,) * (psi.ndim - 2))
            for g in flips:
                psi = apply_local(psi, LocalGate("RX", g.targets[0], -np.pi), n, axis=1)
        else:
            raise ValidationError(f"unsupported sequence element {type(e).__name__}")
    return HybridState(psi[0], initial.n_qubits)


def _polaron_branches(sequence, chain, state: BranchState, boundary_tol):
    n = chain.n_ions
    for e in sequence:
        if isinstance(e, LocalGate):
            state = state.apply_local(e)
        elif isinstance(e, IdealSegment):
            ph = np.exp(-1j * zz_phases(e.effective_lambda(), n))
            state = BranchState(state.qubits * ph, state.modes, n, state.tags)
        elif isinstance(e, EntanglingSegment):
            defect = closure_defect(e.waveform, chain, e.regime)
            if np.max(defect) > boundary_tol:
                raise FrameMismatchError(
                    f"segment boundary residual {np.max(defect):.2e} exceeds {boundary_tol:.1e}")
            for i in e.pattern.flipped:
                state = state.apply_local(LocalGate("RX", i, np.pi))
            lam = e.lambda_matrix(chain)
            ph = np.exp(-1j * (zz_phases(lam, n) + np.sum(np.diag(lam))))
            state = BranchState(state.qubits * ph, state.modes, n, state.tags)
            for i in e.pattern.flipped:
                state = state.apply_local(LocalGate("RX", i, -np.pi))
            state = state.merged()
        else:
            raise ValidationError(f"unsupported sequence element {type(e).__name__}")
    return state


# ----------------------------------------------------------------------------
# fidelities


@dataclass
class FidelityReport:
    gate_fidelity: float | None = None
    process_fidelity: float | None = None
    average_fidelity: float | None = None
    bound: float | None = None
    bound_sqrt_n: float | None = None
    error_norm: float | None = None
    dimension: int = 0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _is_diagonal_sequence(sequence) -> bool:
    return all(not isinstance(e, LocalGate) for e in sequence)


def gate_fidelity(sequence, chain, ideal_unitary, cutoffs=None, fock_weights=None,
                  rtol: float = 1e-10, atol: float = 1e-12, leakage_threshold: float = 1e-6,
                  evolution=None, method: str = "branch", max_raises: int = 4):
    """Gate fidelity averaged over computational inputs with the motion traced out.

    ``F = (1/d^2) sum_m |sum_mu <U mu, m| Psi_mu>|^2`` with ``Psi_mu`` the evolved
    ``|mu> (x) |motion>``.  ``fock_weights`` (list of ``(weight, fock tuple)``)
    replaces the vacuum by a mixture, averaging ``F`` over its members.
    ``evolution`` overrides the dynamics with a callable mapping a dense batch
    ``psi[b, s, modes...]`` to its final value.  ``method`` picks the branch
    or dense engine.  Leaky cutoffs are raised automatically (reported in
    ``info["cutoffs"]``).

    Returns ``(F, info)``.
    """
    n = chain.n_ions
    d = 2**n
    U = np.asarray(ideal_unitary, dtype=complex)
    if U.shape != (d, d):
        raise ValidationError("ideal unitary has the wrong dimension")
    if cutoffs is None:
        cutoffs = (DEFAULT_CUTOFF,) * n
    cutoffs = tuple(int(c) for c in cutoffs)
    members = fock_weights or [(1.0, (0,) * n)]
    diagonal = _is_diagonal_sequence(sequence)
    if evolution is not None:
        method = "dense"
    total = 0.0
    info = {"requested_cutoffs": cutoffs, "single_run": diagonal, "method": method}
    for weight, fock in members:
        for attempt in range(max_raises + 1):
            if method == "branch":
                modes = []
                for f, c in zip(fock, cutoffs):
                    m = np.zeros((d, c + 1), dtype=complex)
                    m[:, f] = 1.0
                    modes.append(m)
                init = BranchState(np.eye(d, dtype=complex), modes, n, np.arange(d))
                final, leak = _run_branches(sequence, chain, init, rtol, atol)
            else:
                motion = np.zeros(tuple(c + 1 for c in cutoffs), dtype=complex)
                motion[tuple(fock)] = 1.0
                if diagonal:
                    psi0 = np.multiply.outer(np.ones((1, d), dtype=complex), motion)
                else:
                    psi0 = np.multiply.outer(np.eye(d, dtype=complex), motion)
                if evolution is not None:
                    psi = evolution(psi0)
                    leak = np.zeros(n)
                else:
                    psi, leak = _run(sequence, chain, psi0, rtol, atol, leakage_threshold)
            if np.all(leak <= leakage_threshold):
                break
            cutoffs = _raised(cutoffs, leak, leakage_threshold)
        else:
            raise CutoffError(f"leakage persists at cutoffs {cutoffs}")
        if method == "branch":
            # amplitude weights c_b = <U mu_b | q_b>, then sum_{b b'} c_b'^* c_b <M_b'|M_b>
            c = np.einsum("bs,bs->b", np.conj(U[:, final.tags].T), final.qubits)
            G = final._overlaps()
            val = float(np.real(np.conj(c) @ G @ c))
        else:
            flat = psi.reshape(psi.shape[0], d, -1)
            if diagonal:
                amp = np.einsum("s,sm->m", np.conj(np.diag(U)), flat[0])
            else:
                amp = np.einsum("sb,bsm->m", np.conj(U), flat)
            val = float(np.sum(np.abs(amp) ** 2))
        total += weight * val / d**2
        info["cutoffs"] = tuple(cutoffs)
        info["max_top_population"] = float(np.max(leak))
    return total / sum(w for w, _ in members), info


def _spin_block(m: int) -> np.ndarray:
    return spins(m).astype(float) if m else np.ones((1, 0))


def bitstring_phases(delta_lambda, chunk_bits: int = 20):
    """Yield blocks of ``lambda(s) = sum_{j != k} dLam_jk s_j s_k`` over all bitstrings."""
    dl = off_diagonal(delta_lambda)
    n = dl.shape[0]
    lo = min(n, max(1, n // 2))
    hi = n - lo
    S_lo = _spin_block(lo)
    lam_lo = np.einsum("bj,jk,bk->b", S_lo, dl[hi:, hi:], S_lo)
    cross = dl[:hi, hi:] @ S_lo.T  # (hi, 2**lo)
    step = 2 ** max(0, min(hi, chunk_bits - lo))
    for start in range(0, 2**hi, step):
        idx = np.arange(start, min(start + step, 2**hi))
        S_hi = 1 - 2 * ((idx[:, None] >> np.arange(hi - 1, -1, -1)) & 1) if hi else np.ones((1, 0))
        S_hi = S_hi.astype(float)
        lam_hi = np.einsum("bj,jk,bk->b", S_hi, dl[:hi, :hi], S_hi)
        yield lam_hi[:, None] + lam_lo[None, :] + 2 * (S_hi @ cross)


def process_fidelity_diagonal(lambda_realized, lambda_target, n: int | None = None):
    """``F_pro = |sum_s exp(-i lambda(s))|^2 / d^2`` and ``F_avg = (d F_pro + 1)/(d + 1)``."""
    dl = np.asarray(lambda_realized, dtype=float) - np.asarray(lambda_target, dtype=float)
    n = dl.shape[0] if n is None else n
    if n > MAX_ENUMERATION_IONS:
        raise SizeLimitError(f"bitstring enumeration limited to N <= {MAX_ENUMERATION_IONS}")
    d = 2.0**n
    acc = 0j
    for block in bitstring_phases(dl):
        acc += np.exp(-1j * block).sum()
    f_pro = float(abs(acc) ** 2 / d**2)
    return f_pro, (d * f_pro + 1) / (d + 1)


def worst_case_bound(lambda_realized, lambda_target, n: int | None = None):
    """``cos^2(N ||dLam||_2)``, or ``None`` outside ``N ||dLam||_2 <= pi/2``."""
    dl = off_diagonal(np.asarray(lambda_realized, float) - np.asarray(lambda_target, float))
    n = dl.shape[0] if n is None else n
    norm = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (dl + dl.T))))) if dl.size else 0.0
    x = n * norm
    return (float(np.cos(x) ** 2) if x <= np.pi / 2 else None), norm


def exact_worst_case_fidelity(lambda_realized, lambda_target, n: int | None = None) -> float:
    """Minimum over pure states of ``|<psi| E |psi>|^2`` for the diagonal error ``E``.

    Equals the squared distance from the origin to the convex hull of the
    points ``exp(-i lambda(s))``: zero when they are not confined to a half
    circle, else ``cos^2(w/2)`` for the smallest arc width ``w`` covering them.
    """
    dl = np.asarray(lambda_realized, float) - np.asarray(lambda_target, float)
    n = dl.shape[0] if n is None else n
    if n > MAX_ENUMERATION_IONS:
        raise SizeLimitError(f"bitstring enumeration limited to N <= {MAX_ENUMERATION_IONS}")
    ang = np.sort(np.mod(np.concatenate([b.ravel() for b in bitstring_phases(dl)]), 2 * np.pi))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    width = 2 * np.pi - gaps.max()
    return float(np.cos(width / 2) ** 2) if width < np.pi else 0.0


def fidelity_report(lambda_realized, lambda_target, n: int | None = None) -> FidelityReport:
    dl = np.asarray(lambda_realized, float) - np.asarray(lambda_target, float)
    n = dl.shape[0] if n is None else n
    f_pro, f_avg = process_fidelity_diagonal(lambda_realized, lambda_target, n)
    bound, norm = worst_case_bound(lambda_realized, lambda_target, n)
    x = np.sqrt(n) * norm
    alt = float(np.cos(x) ** 2) if x <= np.pi / 2 else None
    return FidelityReport(None, f_pro, f_avg, bound, alt, norm, 2**n,
                          {"bound_prefactor": "N", "alternative_prefactor": "sqrt(N)"})


# ----------------------------------------------------------------------------
# observables


def von_neumann_entropy(rho, base: float = 2.0) -> float:
    ev = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    ev = ev[ev > 1e-15]
    return float(-np.sum(ev * np.log(ev)) / np.log(base))


def reduced_qubit_density(rho, keep, n: int) -> np.ndarray:
    """Partial trace of a qubit density matrix onto the ions in ``keep``."""
    keep = sorted(int(k) for k in keep)
    if any(k < 0 or k >= n for k in keep):
        raise ValidationError("bipartition index out of range")
    drop = [k for k in range(n) if k not in keep]
    r = np.asarray(rho).reshape((2,) * (2 * n))
    for j, k in enumerate(sorted(drop, reverse=True)):
        m = n - j
        r = np.trace(r, axis1=k, axis2=k + m)
    dk = 2 ** len(keep)
    return r.reshape(dk, dk)


def entanglement_entropy(rho, subsystem, n: int) -> float:
    return von_neumann_entropy(reduced_qubit_density(rho, subsystem, n))


def predicted_phonon_numbers(waveform, chain, qubit_state, t, initial_numbers=None):
    """``n_l(t) = n_l(0) + |Delta_l(t)|^2 <S_l^2>`` for a drive switched on at ``t = 0``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    delta = mode_amplitudes(waveform, chain, g0=np.zeros(chain.n_ions, complex), t=t)
    p = np.abs(np.asarray(qubit_state, dtype=complex)) ** 2
    p = p / p.sum()
    S = spins(chain.n_ions) @ chain.eta
    s2 = p @ S**2
    n0 = np.zeros(chain.n_ions) if initial_numbers is None else np.asarray(initial_numbers)
    return n0 + np.abs(delta) ** 2 * s2


def observables(trajectory: Trajectory, n_qubits: int, bipartitions=()) -> dict:
    """Series extracted from a sampled trajectory.

    Keys: ``times``, ``phonon_numbers`` (T x modes), ``phase_space`` (T x sectors
    x modes, complex), ``entropies`` (name -> T series, bits) and
    ``basis_phases`` (T x 2**N, vacuum-projected amplitudes' arguments).
    """
    arr = trajectory.arrays()
    ent = {}
    for part in bipartitions:
        name = "S{" + ",".join(str(i + 1) for i in part) + "}"
        ent[name] = np.array([entanglement_entropy(r, part, n_qubits) for r in arr["qubit_rho"]])
    return {
        "times": arr["times"],
        "phonon_numbers": arr["phonon_numbers"],
        "phase_space": arr["sector_displacements"],
        "entropies": ent,
        "basis_phases": np.angle(arr["vacuum_amplitudes"]),
        "norms": arr["norms"],
    }


def ideal_segment_lambda(segment, chain):
    return lambda_from_phases(chain.eta, np.zeros(chain.n_ions)) if segment is None else \
        segment.effective_lambda(chain)
