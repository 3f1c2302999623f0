"""Entangling gates for trapped-ion chains driven by a single global field in a magnetic gradient.

Modules by layer:

* :mod:`.chain` equilibrium positions, normal modes and spin-motion couplings
* :mod:`.drive` multi-tone waveforms and closed-form mode dynamics
* :mod:`.synthesis` coupling-matrix algebra, spin echoes, static schedules
* :mod:`.optimizer` waveform synthesis by multistart least squares
* :mod:`.circuits` QFT and mirror-pair circuits built from entangling blocks
* :mod:`.simulator` lab-frame and polaron-frame evolution, fidelities, observables
* :mod:`.cli` command-line experiment runner
"""

__version__ = "0.1.0"

from .chain import IonChain, PhysicalParams, build_chain, chain_with_com_eta
from .drive import OSCILLATING, STATIC, DriveWaveform, accumulated_phases, mode_amplitudes
from .errors import (ConfigurationError, CutoffError, FrameMismatchError, GateError,
                     NotConvergedError, ResonantToneError, SizeLimitError, SolverFailure,
                     ValidationError)
from .optimizer import SynthesisProblem, SynthesisResult, synthesize_sequence, synthesize_waveform
from .sequence import EntanglingSegment, GateSequence, IdealSegment, LocalGate
from .synthesis import (SignPattern, iterative_decomposition, lambda_from_phases,
                        monochromatic_reference, single_segment_test, static_min_time_schedule)

__all__ = [
    "IonChain", "PhysicalParams", "build_chain", "chain_with_com_eta",
    "DriveWaveform", "STATIC", "OSCILLATING", "accumulated_phases", "mode_amplitudes",
    "GateError", "ValidationError", "ConfigurationError", "SizeLimitError", "SolverFailure",
    "ResonantToneError", "FrameMismatchError", "CutoffError", "NotConvergedError",
    "SynthesisProblem", "SynthesisResult", "synthesize_waveform", "synthesize_sequence",
    "GateSequence", "LocalGate", "EntanglingSegment", "IdealSegment",
    "SignPattern", "lambda_from_phases", "single_segment_test", "iterative_decomposition",
    "static_min_time_schedule", "monochromatic_reference",
]
