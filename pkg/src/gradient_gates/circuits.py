"""Circuit assembly: quantum Fourier transform stages and the mirror-pair singlet protocol.

Two-qubit phase targets are written as *angle matrices* ``theta`` meaning the
unitary ``prod_{j<k} exp(+i theta_jk Z_j Z_k)``.  The coupling matrix used
everywhere else satisfies ``exp(-i sum_{j != k} Lam_jk Z_j Z_k)``, hence
``Lam = -theta / 2``.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .sequence import (EntanglingSegment, GateSequence, IdealSegment, LocalGate,
                       apply_local)
from .synthesis import SignPattern, iterative_decomposition, symmetric


def angles_to_lambda(theta) -> np.ndarray:
    return -0.5 * symmetric(theta)


def lambda_to_angles(lam) -> np.ndarray:
    return -2.0 * symmetric(lam)


# ----------------------------------------------------------------------------
# textbook reference matrices


def controlled_phase(phi: float) -> np.ndarray:
    return np.diag([1, 1, 1, np.exp(1j * phi)])


def qft_matrix(n: int) -> np.ndarray:
    """``F[y, x] = exp(2 pi i x y / 2**n) / sqrt(2**n)``, ion 1 most significant."""
    d = 2**n
    k = np.arange(d)
    return np.exp(2j * np.pi * np.outer(k, k) / d) / np.sqrt(d)


def qft_textbook_circuit(n: int) -> np.ndarray:
    """QFT assembled gate by gate from Hadamards, controlled phases and swaps."""
    d = 2**n
    U = np.eye(d, dtype=complex)
    for l in range(n):
        U = apply_local(U, LocalGate("H", l), n)
        for k in range(l + 1, n):
            phi = np.pi / 2 ** (k - l)
            bits = (np.arange(d)[:, None] >> np.array([n - 1 - l, n - 1 - k])) & 1
            U = np.exp(1j * phi * bits[:, 0] * bits[:, 1])[:, None] * U
    for j in range(n // 2):
        U = apply_local(U, LocalGate("SWAP", (j, n - 1 - j)), n)
    return U


# ----------------------------------------------------------------------------
# QFT


def qft_phase_angles(n: int) -> np.ndarray:
    """Controlled-phase angles ``phi_jk = pi / 2**|j - k|`` (zero diagonal)."""
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :])
    phi = np.pi / 2.0**dist
    np.fill_diagonal(phi, 0.0)
    return phi


def qft_stage_targets(n: int) -> list[np.ndarray]:
    """ZZ angle matrices of stages ``l = 1 .. N-1``.

    Stage ``l`` carries ``theta_jk = pi / 2**(|j - k| + 2)`` on the pairs
    ``(l, k)`` with ``k > l`` and nothing else.
    """
    if n < 2:
        raise ValidationError("QFT needs at least two qubits")
    phi = qft_phase_angles(n)
    out = []
    for l in range(n - 1):
        theta = np.zeros((n, n))
        theta[l, l + 1:] = phi[l, l + 1:] / 4
        out.append(theta + theta.T)
    return out


def qft_stage_rz(n: int, stage: int) -> list[LocalGate]:
    """Z rotations completing the stage's ZZ phases into controlled phases.

    ``CP(phi) = exp(i phi/4) Rz_j(phi/2) Rz_k(phi/2) exp(i phi/4 Z_j Z_k)``.
    """
    phi = qft_phase_angles(n)
    rz = np.zeros(n)
    for k in range(stage + 1, n):
        rz[stage] += phi[stage, k] / 2
        rz[k] += phi[stage, k] / 2
    return [LocalGate("RZ", j, rz[j]) for j in range(n) if rz[j] != 0.0]


def _entangling_block(theta, chain, synthesize, label, max_segments=4, **options):
    """Elements realizing ``exp(i sum theta ZZ)``: pi-pulse-framed segments."""
    lam = angles_to_lambda(theta)
    n = lam.shape[0]
    if chain is None:
        eta = None
    else:
        eta = chain.eta
    if eta is None:
        return [IdealSegment(lam, SignPattern.identity(n), label)]
    dec = iterative_decomposition(lam, eta, max_segments=max_segments)
    if not dec.converged:
        raise ValidationError(f"{label}: decomposition did not converge")
    elements = []
    for p, (pattern, seg_lam) in enumerate(zip(dec.patterns, dec.segment_lambdas())):
        name = f"{label}.{p + 1}"
        flips = [LocalGate("RX", i, np.pi) for i in pattern.flipped]
        unflips = [LocalGate("RX", i, -np.pi) for i in pattern.flipped]
        if synthesize:
            from .optimizer import SynthesisProblem, synthesize_waveform

            problem = SynthesisProblem(chain, seg_lam, **options)
            res = synthesize_waveform(problem)
            if not res.converged:
                raise ValidationError(f"{name}: drive synthesis did not converge")
            seg = EntanglingSegment(res.waveform, SignPattern.identity(n), problem.boundary_regime,
                                    target_lambda=seg_lam, result=res, label=name)
        else:
            seg = IdealSegment(seg_lam, SignPattern.identity(n), name)
        elements += flips + [seg] + unflips
    return elements


def compile_qft(n: int, chain=None, synthesize: bool = False, swap_mode: str = "local",
                **options) -> GateSequence:
    """QFT as Hadamards, per-stage entangling blocks, Z rotations and a swap layer.

    Without ``chain`` every stage is an :class:`IdealSegment`.  With a chain the
    stage matrices are decomposed into pi-pulse-framed single-drive segments,
    which are synthesized when ``synthesize`` is set (``options`` go to the
    synthesis problem).  ``swap_mode`` is ``"local"`` (ideal swaps),
    ``"rainbow"`` (three mirror-pair ZZ blocks with basis changes) or
    ``"none"`` (bit reversal left to post-processing).
    """
    stages = qft_stage_targets(n)
    seq = GateSequence()
    for l in range(n):
        seq.append(LocalGate("H", l))
        if l < n - 1:
            seq.extend(_entangling_block(stages[l], chain, synthesize, f"qft-stage-{l + 1}",
                                         **options))
            seq.extend(qft_stage_rz(n, l))
    if swap_mode == "local":
        seq.extend(LocalGate("SWAP", (j, n - 1 - j)) for j in range(n // 2))
    elif swap_mode == "rainbow":
        seq.extend(compile_swap_layer(n, chain, synthesize, **options))
    elif swap_mode != "none":
        raise ValidationError(f"unknown swap mode {swap_mode!r}")
    return seq


# ----------------------------------------------------------------------------
# mirror-pair (rainbow) protocols


def mirror_pairs(n: int) -> list[tuple[int, int]]:
    return [(j, n - 1 - j) for j in range(n // 2)]


def rainbow_angles(n: int, J: float = np.pi / 4) -> np.ndarray:
    """ZZ angle matrix ``J`` on mirror pairs ``(k, N - k + 1)``."""
    theta = np.zeros((n, n))
    for j, k in mirror_pairs(n):
        theta[j, k] = theta[k, j] = J
    return theta


def swap_layer_targets(n: int) -> list[np.ndarray]:
    """Angle matrices of the XX, YY and ZZ mirror-pair sub-gates (``pi/4`` each)."""
    theta = rainbow_angles(n, np.pi / 4)
    return [theta.copy(), theta.copy(), theta.copy()]


def swap_basis_changes(n: int):
    """(before, after) local gates turning a ZZ block into XX, YY and ZZ blocks."""
    ions = [i for pair in mirror_pairs(n) for i in pair]
    xx = ([LocalGate("H", i) for i in ions], [LocalGate("H", i) for i in ions])
    yy = ([LocalGate("RX", i, np.pi / 2) for i in ions],
          [LocalGate("RX", i, -np.pi / 2) for i in ions])
    return [xx, yy, ([], [])]


def compile_swap_layer(n: int, chain=None, synthesize=False, **options) -> list:
    elements = []
    for theta, (pre, post), name in zip(swap_layer_targets(n), swap_basis_changes(n),
                                        ("XX", "YY", "ZZ")):
        elements += pre
        elements += _entangling_block(theta, chain, synthesize, f"swap-{name}", **options)
        elements += post
    return elements


def compile_rainbow(n: int, chain=None, J: float = np.pi / 4, synthesize: bool = False,
                    mode: str = "full", **options) -> GateSequence:
    """Singlets on every mirror pair from ``|0...0>``.

    Hadamard and S on all ions prepare ``(S|+>)^N``; the mirror-pair ZZ block
    with angle ``J`` then acts as a CNOT-like entangler (exactly a CZ up to
    local phases at ``J = pi/4``); Hadamard and X on the right partner and Z
    on the left partner finish every singlet.  ``mode="pairwise"`` allows an
    odd ``N`` (the middle ion is left alone).
    """
    if mode not in ("full", "pairwise"):
        raise ValidationError(f"unknown rainbow mode {mode!r}")
    if mode == "full" and n % 2:
        raise ValidationError("the full rainbow state needs an even number of ions")
    pairs = mirror_pairs(n)
    ions = [i for pair in pairs for i in pair]
    seq = GateSequence()
    seq.extend(LocalGate("H", i) for i in ions)
    seq.extend(LocalGate("S", i) for i in ions)
    seq.extend(_entangling_block(rainbow_angles(n, J), chain, synthesize, "rainbow",
                                 **options))
    seq.extend(LocalGate("H", k) for _, k in pairs)
    seq.extend(LocalGate("X", k) for _, k in pairs)
    seq.extend(LocalGate("Z", j) for j, _ in pairs)
    return seq


def singlet_product_state(n: int) -> np.ndarray:
    """Product of ``(|01> - |10>)/sqrt 2`` on mirror pairs (qubit register only)."""
    if n % 2:
        raise ValidationError("needs an even number of qubits")
    psi = np.zeros(2**n, dtype=complex)
    m = n // 2
    for choice in range(2**m):
        bits = [0] * n
        sign = 1.0
        for p, (j, k) in enumerate(mirror_pairs(n)):
            if (choice >> p) & 1:
                bits[j], bits[k] = 1, 0
                sign = -sign
            else:
                bits[j], bits[k] = 0, 1
        idx = int("".join(map(str, bits)), 2)
        psi[idx] = sign
    return psi / np.linalg.norm(psi)
