"""Gate sequences: instantaneous local gates and drive segments with pi-pulse frames.

Qubit states are indexed by bitstrings ``b_1 ... b_N`` with ion 1 as the most
significant bit; ``Z`` has eigenvalue ``s = 1 - 2 b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drive import OSCILLATING, DriveWaveform
from .errors import ValidationError
from .synthesis import SignPattern, spin_echo_conjugate, symmetric

_SQ2 = 1 / np.sqrt(2)
_FIXED = {
    "H": np.array([[1, 1], [1, -1]], dtype=complex) * _SQ2,
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "S": np.array([[1, 0], [0, 1j]], dtype=complex),
    "SDG": np.array([[1, 0], [0, -1j]], dtype=complex),
}
_ROTATIONS = ("RX", "RY", "RZ")
GATE_KINDS = tuple(_FIXED) + _ROTATIONS + ("SWAP",)


@dataclass(frozen=True)
class LocalGate:
    kind: str
    targets: tuple[int, ...]
    angle: float | None = None

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        targets = tuple(int(t) for t in np.atleast_1d(self.targets))
        object.__setattr__(self, "targets", targets)
        if kind not in GATE_KINDS:
            raise ValidationError(f"unknown gate kind {self.kind!r}")
        if kind == "SWAP":
            if len(targets) != 2 or targets[0] == targets[1]:
                raise ValidationError("SWAP needs two distinct targets")
        elif len(targets) != 1:
            raise ValidationError(f"{kind} acts on a single ion")
        if kind in _ROTATIONS:
            if self.angle is None or not np.isfinite(self.angle):
                raise ValidationError(f"{kind} needs a finite angle")
            object.__setattr__(self, "angle", float(self.angle))
        if any(t < 0 for t in targets):
            raise ValidationError("ion indices must be non-negative")

    def matrix(self) -> np.ndarray:
        """2x2 (or 4x4 for SWAP) unitary."""
        if self.kind in _FIXED:
            return _FIXED[self.kind]
        if self.kind == "SWAP":
            return np.eye(4, dtype=complex)[[0, 2, 1, 3]]
        c, s = np.cos(self.angle / 2), np.sin(self.angle / 2)
        if self.kind == "RX":
            return np.array([[c, -1j * s], [-1j * s, c]])
        if self.kind == "RY":
            return np.array([[c, -s], [s, c]], dtype=complex)
        return np.array([[np.exp(-0.5j * self.angle), 0], [0, np.exp(0.5j * self.angle)]])

    def label(self) -> str:
        t = ",".join(str(i + 1) for i in self.targets)
        if self.angle is None:
            return f"{self.kind}({t})"
        return f"{self.kind}[{self.angle:.6g}]({t})"

    def to_dict(self) -> dict:
        d = {"op": "local", "kind": self.kind, "targets": list(self.targets)}
        if self.angle is not None:
            d["angle"] = self.angle
        return d


@dataclass
class EntanglingSegment:
    """Drive ``waveform`` applied between pi-pulses on the ions flipped by ``pattern``."""

    waveform: DriveWaveform
    pattern: SignPattern
    regime: str = OSCILLATING
    target_lambda: np.ndarray | None = None
    result: object = None
    label: str = ""

    @property
    def duration(self) -> float:
        return self.waveform.duration

    def lambda_matrix(self, chain) -> np.ndarray:
        """Coupling matrix produced by the drive, before pi-pulse conjugation."""
        from .drive import accumulated_phases, regime_initial_condition
        from .synthesis import lambda_from_phases

        g0 = regime_initial_condition(self.waveform, chain.n_ions, self.regime)
        return lambda_from_phases(chain.eta, accumulated_phases(self.waveform, chain, g0=g0))

    def effective_lambda(self, chain) -> np.ndarray:
        return spin_echo_conjugate(self.lambda_matrix(chain), self.pattern)

    def to_dict(self) -> dict:
        d = {"op": "segment", "waveform": self.waveform.to_dict(),
             "pattern": list(self.pattern.signs), "regime": self.regime, "label": self.label}
        if self.target_lambda is not None:
            d["target_lambda"] = np.asarray(self.target_lambda).tolist()
        return d


@dataclass
class IdealSegment:
    """Entangling step specified only by its coupling matrix (no drive attached)."""

    lam: np.ndarray
    pattern: SignPattern | None = None
    label: str = ""
    duration: float = 0.0

    def __post_init__(self):
        self.lam = symmetric(self.lam)
        if self.pattern is None:
            self.pattern = SignPattern.identity(self.lam.shape[0])

    def effective_lambda(self, chain=None) -> np.ndarray:
        return spin_echo_conjugate(self.lam, self.pattern)

    def to_dict(self) -> dict:
        return {"op": "ideal", "lambda": self.lam.tolist(), "pattern": list(self.pattern.signs),
                "label": self.label, "duration": self.duration}


@dataclass
class GateSequence:
    elements: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.elements)

    def __len__(self):
        return len(self.elements)

    def append(self, element):
        self.elements.append(element)
        return self

    def extend(self, elements):
        self.elements.extend(elements)
        return self

    @property
    def total_duration(self) -> float:
        return float(sum(getattr(e, "duration", 0.0) for e in self.elements))

    def segments(self):
        return [e for e in self.elements if isinstance(e, (EntanglingSegment, IdealSegment))]

    def to_dict(self) -> dict:
        ops, t = [], 0.0
        for e in self.elements:
            d = e.to_dict()
            d["start"] = t
            t += getattr(e, "duration", 0.0)
            ops.append(d)
        return {"total_duration": t, "ops": ops}

    @classmethod
    def from_dict(cls, data: dict) -> "GateSequence":
        out = []
        for op in data["ops"]:
            kind = op["op"]
            if kind == "local":
                out.append(LocalGate(op["kind"], tuple(op["targets"]), op.get("angle")))
            elif kind == "segment":
                tl = op.get("target_lambda")
                out.append(EntanglingSegment(DriveWaveform.from_dict(op["waveform"]),
                                             SignPattern(tuple(op["pattern"])), op["regime"],
                                             None if tl is None else np.array(tl),
                                             label=op.get("label", "")))
            elif kind == "ideal":
                out.append(IdealSegment(np.array(op["lambda"]), SignPattern(tuple(op["pattern"])),
                                        op.get("label", ""), op.get("duration", 0.0)))
            else:
                raise ValidationError(f"unknown sequence op {kind!r}")
        return cls(out)

    def listing(self) -> str:
        """Human-readable circuit listing, one operation per line."""
        lines, t = [], 0.0
        for e in self.elements:
            if isinstance(e, LocalGate):
                lines.append(f"t={t * 1e6:10.3f} us  {e.label()}")
            else:
                flips = [str(i + 1) for i in e.pattern.flipped]
                frame = f" pi-frame on ions {','.join(flips)}" if flips else ""
                name = e.label or ("segment" if isinstance(e, EntanglingSegment) else "ideal")
                lines.append(f"t={t * 1e6:10.3f} us  {name} T={e.duration * 1e6:.3f} us{frame}")
                t += e.duration
        return "\n".join(lines)


# ----------------------------------------------------------------------------
# qubit-only linear algebra


def spins(n: int) -> np.ndarray:
    """``(2**n, n)`` array of Z eigenvalues per basis state."""
    idx = np.arange(2**n)
    bits = (idx[:, None] >> np.arange(n - 1, -1, -1)) & 1
    return 1 - 2 * bits


def zz_phases(lam, n: int | None = None) -> np.ndarray:
    """Phases ``sum_{j != k} Lam_jk s_j s_k`` for every basis state."""
    lam = np.asarray(lam, dtype=float)
    n = lam.shape[0] if n is None else n
    s = spins(n).astype(float)
    off = lam - np.diag(np.diag(lam))
    return np.einsum("bj,jk,bk->b", s, off, s)


def zz_unitary_diagonal(lam) -> np.ndarray:
    """Diagonal of ``exp(-i sum_{j != k} Lam_jk Z_j Z_k)``."""
    return np.exp(-1j * zz_phases(lam))


def apply_local(state: np.ndarray, gate: LocalGate, n: int, axis: int = 0) -> np.ndarray:
    """Apply ``gate`` to the qubit register stored flattened along ``axis``."""
    state = np.moveaxis(state, axis, 0)
    rest = state.shape[1:]
    psi = state.reshape((2,) * n + rest)
    for t in gate.targets:
        if t >= n:
            raise ValidationError(f"gate target {t + 1} exceeds {n} ions")
    if gate.kind == "SWAP":
        j, k = gate.targets
        psi = np.swapaxes(psi, j, k)
    else:
        t = gate.targets[0]
        psi = np.moveaxis(np.tensordot(gate.matrix(), psi, axes=([1], [t])), 0, t)
    return np.moveaxis(np.ascontiguousarray(psi).reshape(state.shape), 0, axis)


def sequence_unitary(sequence: GateSequence, n: int, chain=None, use: str = "effective"):
    """Qubit-only unitary of a sequence.

    Segments contribute ``exp(-i sum Lam_jk Z_j Z_k)`` with ``Lam`` their
    effective (pi-pulse conjugated) coupling; ``use="target"`` takes the
    stored target instead of the drive's achieved coupling.
    """
    U = np.eye(2**n, dtype=complex)
    for e in sequence:
        if isinstance(e, LocalGate):
            U = apply_local(U, e, n)
        else:
            if use == "target" and isinstance(e, EntanglingSegment):
                lam = spin_echo_conjugate(e.target_lambda, e.pattern)
            else:
                lam = e.effective_lambda(chain)
            U = zz_unitary_diagonal(lam)[:, None] * U
    return U


def phase_aligned_distance(U, V) -> float:
    """``min_phi ||U - e^{i phi} V||_F / sqrt(d)``."""
    U = np.asarray(U)
    V = np.asarray(V)
    ov = np.vdot(V, U)
    phase = ov / abs(ov) if abs(ov) > 0 else 1.0
    return float(np.linalg.norm(U - phase * V) / np.sqrt(U.shape[0]))
