"""Exception hierarchy shared by all modules."""


class GateError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(GateError, ValueError):
    """Invalid input: bad shapes, out-of-range parameters, envelope violations."""

    exit_code = 2


class ConfigurationError(GateError, ValueError):
    """Physically inconsistent configuration (degenerate modes, rank deficiency...)."""

    exit_code = 2


class SizeLimitError(GateError, ValueError):
    """Problem size exceeds a hard enumeration cap."""

    exit_code = 2


class SolverFailure(GateError, RuntimeError):
    """A numerical solver did not converge within its iteration budget."""

    exit_code = 3

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ResonantToneError(GateError, ValueError):
    """A drive tone sits inside the resonance guard band of a mode."""

    exit_code = 2

    def __init__(self, tone, mode, detuning):
        super().__init__(
            f"tone {tone} is within the resonance guard of mode {mode} "
            f"(detuning {detuning:.3e} rad/s)"
        )
        self.tone = tone
        self.mode = mode
        self.detuning = detuning


class FrameMismatchError(GateError, RuntimeError):
    """Polaron and lab frames disagree at the gate boundaries."""

    exit_code = 3


class CutoffError(GateError, RuntimeError):
    """Fock-space truncation is too small for the simulated dynamics."""

    exit_code = 3


class NotConvergedError(GateError, RuntimeError):
    """Raised by the CLI when a synthesis run finishes without converging."""

    exit_code = 4
