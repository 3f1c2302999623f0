"""Static structure of a linear ion chain: equilibrium, axial modes, couplings.

Lengths are solved in the dimensionless unit ``(q**2 / (4 pi eps0 m nu1**2))**(1/3)``
so that the trap potential is ``sum(u**2)/2 + sum_{i<j} 1/|u_i - u_j|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.constants as const

from .errors import ConfigurationError, SolverFailure, ValidationError

AMU = const.physical_constants["atomic mass constant"][0]
MU_B = const.physical_constants["Bohr magneton"][0]


@dataclass(frozen=True)
class PhysicalParams:
    """Trap, species and field parameters entering the coupling constants.

    ``trap_frequency`` is the angular frequency (rad/s) of the axial
    center-of-mass mode and ``gradient`` the field gradient in T/m.
    """

    ion_mass: float = 171 * AMU
    trap_frequency: float = 2 * np.pi * 100e3
    gradient: float = 250.0
    lande_gF: float = 1.0
    mF: float = 1.0
    bohr_magneton: float = MU_B
    hbar: float = const.hbar
    charge: float = const.e
    qubit_frequencies: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.ion_mass > 0:
            raise ValidationError("ion_mass must be positive")
        if not self.trap_frequency > 0:
            raise ValidationError("trap_frequency must be positive")
        for name in ("bohr_magneton", "hbar", "charge"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        object.__setattr__(self, "qubit_frequencies",
                           tuple(float(w) for w in self.qubit_frequencies))

    @property
    def length_unit(self) -> float:
        """Characteristic ion spacing scale in metres."""
        k = self.charge**2 / (4 * np.pi * const.epsilon_0)
        return (k / (self.ion_mass * self.trap_frequency**2)) ** (1 / 3)


@dataclass(frozen=True, eq=False)
class IonChain:
    n_ions: int
    positions: np.ndarray  # metres
    mode_frequencies: np.ndarray  # rad/s, ascending
    mode_matrix: np.ndarray  # chi[j, l]: displacement of ion j in mode l
    eta: np.ndarray  # eta[j, l]
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def __post_init__(self):
        for name in ("positions", "mode_frequencies", "mode_matrix", "eta"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def com_eta(self) -> float:
        """Per-ion coupling to the center-of-mass mode."""
        return float(abs(self.eta[0, 0]))

    @property
    def qubit_frequencies(self) -> np.ndarray:
        w = np.asarray(self.params.qubit_frequencies, dtype=float)
        if w.size == 0:
            return np.zeros(self.n_ions)
        if w.size != self.n_ions:
            raise ConfigurationError(
                f"{w.size} qubit frequencies given for {self.n_ions} ions")
        return w

    def with_gradient(self, gradient: float) -> "IonChain":
        """Same chain with a different field gradient (couplings rescale linearly)."""
        params = replace(self.params, gradient=gradient)
        eta = coupling_matrix(self.mode_frequencies, self.mode_matrix, params)
        return IonChain(self.n_ions, self.positions, self.mode_frequencies,
                        self.mode_matrix, eta, params)

    def to_dict(self) -> dict:
        p = self.params
        return {
            "n_ions": self.n_ions,
            "positions": self.positions.tolist(),
            "mode_frequencies": self.mode_frequencies.tolist(),
            "mode_matrix": self.mode_matrix.tolist(),
            "eta": self.eta.tolist(),
            "params": {
                "ion_mass": p.ion_mass,
                "trap_frequency": p.trap_frequency,
                "gradient": p.gradient,
                "lande_gF": p.lande_gF,
                "mF": p.mF,
                "bohr_magneton": p.bohr_magneton,
                "hbar": p.hbar,
                "charge": p.charge,
                "qubit_frequencies": list(p.qubit_frequencies),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IonChain":
        params = PhysicalParams(**data["params"])
        return cls(int(data["n_ions"]), np.array(data["positions"]),
                   np.array(data["mode_frequencies"]),
                   np.array(data["mode_matrix"]), np.array(data["eta"]), params)


def _potential_gradient(u):
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    return u - np.sum(np.sign(diff) / diff**2, axis=1)


def _potential_hessian(u):
    diff = np.abs(u[:, None] - u[None, :])
    np.fill_diagonal(diff, np.inf)
    off = -2.0 / diff**3
    hess = off.copy()
    np.fill_diagonal(hess, 1.0 - off.sum(axis=1))
    return hess


def _initial_guess(n):
    # Approximate equilibrium (arcsine-profile ansatz), good for n up to ~100.
    i = np.arange(1, n + 1)
    return 3.94 * n**0.387 * np.sin(np.arcsin(1.75 * n**-0.982 * (i - (n + 1) / 2)) / 3)


def dimensionless_equilibrium(n_ions: int, tol: float = 1e-13,
                              max_iter: int = 200) -> np.ndarray:
    """Equilibrium positions in units of the characteristic length.

    Damped Newton iteration on the force balance; the step is halved until the
    residual max-norm decreases.
    """
    if n_ions < 1:
        raise ValidationError("n_ions must be >= 1")
    if n_ions == 1:
        return np.zeros(1)
    u = _initial_guess(n_ions)
    res = np.max(np.abs(_potential_gradient(u)))
    for _ in range(max_iter):
        if res < tol:
            break
        step = np.linalg.solve(_potential_hessian(u), _potential_gradient(u))
        lam = 1.0
        while True:
            trial = u - lam * step
            ordered = np.all(np.diff(trial) > 0)
            trial_res = np.max(np.abs(_potential_gradient(trial))) if ordered else np.inf
            if trial_res < res or lam < 1e-6:
                break
            lam /= 2
        if not np.isfinite(trial_res):
            break
        u, res = trial, trial_res
    if res >= max(tol, 1e-12):
        raise SolverFailure(f"equilibrium solve did not converge for N={n_ions}",
                            residual=res)
    # enforce exact reflection symmetry of the converged solution
    u = 0.5 * (u - u[::-1])
    return u


def equilibrium_positions(n_ions: int, trap_frequency: float, mass: float,
                          charge: float = const.e) -> np.ndarray:
    """Axial equilibrium positions (m), sorted ascending."""
    params = PhysicalParams(ion_mass=mass, trap_frequency=trap_frequency, charge=charge)
    return dimensionless_equilibrium(n_ions) * params.length_unit


def normal_modes(positions: np.ndarray, params: PhysicalParams):
    """Axial normal modes of the chain.

    Returns
    -------
    nu : ndarray
        Mode angular frequencies, ascending (rad/s).
    chi : ndarray
        Orthogonal mode matrix; column ``l`` is mode ``l`` with its
        largest-magnitude entry made positive.
    """
    u = np.asarray(positions, dtype=float) / params.length_unit
    n = u.size
    if n > 1 and np.max(np.abs(_potential_gradient(u))) > 1e-8:
        raise ConfigurationError("positions are not an equilibrium configuration")
    hess = _potential_hessian(u) if n > 1 else np.ones((1, 1))
    evals, evecs = np.linalg.eigh(hess)
    if evals[0] <= 0:
        raise ConfigurationError("potential Hessian is not positive definite")
    if n > 1 and np.min(np.diff(evals) / evals[1:]) < 1e-9:
        raise ConfigurationError("degenerate axial mode frequencies")
    idx = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[idx, np.arange(n)])
    return params.trap_frequency * np.sqrt(evals), evecs


def coupling_matrix(nu: np.ndarray, chi: np.ndarray, params: PhysicalParams) -> np.ndarray:
    """Dimensionless qubit-motion couplings ``eta[j, l]``."""
    nu = np.asarray(nu, dtype=float)
    z0 = np.sqrt(params.hbar / (2 * params.ion_mass * nu))
    scale = (params.lande_gF * params.mF * params.bohr_magneton * z0
             / (params.hbar * nu)) * params.gradient
    return np.asarray(chi, dtype=float) * scale[None, :]


def build_chain(n_ions: int, params: PhysicalParams | None = None) -> IonChain:
    params = params or PhysicalParams()
    positions = dimensionless_equilibrium(n_ions) * params.length_unit
    nu, chi = normal_modes(positions, params)
    eta = coupling_matrix(nu, chi, params)
    return IonChain(n_ions, positions, nu, chi, eta, params)


def gradient_for_com_eta(n_ions: int, com_eta: float,
                         params: PhysicalParams | None = None) -> float:
    """Field gradient giving per-ion center-of-mass coupling ``com_eta``."""
    params = replace(params or PhysicalParams(), gradient=1.0)
    unit = coupling_matrix([params.trap_frequency], [[1 / np.sqrt(n_ions)]], params)
    return float(com_eta / abs(unit[0, 0]))


def chain_with_com_eta(n_ions: int, com_eta: float,
                       params: PhysicalParams | None = None) -> IonChain:
    """Chain whose gradient is tuned so that every ion couples to the COM mode with ``com_eta``."""
    params = params or PhysicalParams()
    grad = gradient_for_com_eta(n_ions, com_eta, params)
    return build_chain(n_ions, replace(params, gradient=grad))
