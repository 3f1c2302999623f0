import numpy as np
import pytest

from gradient_gates import (SynthesisProblem, chain_with_com_eta, synthesize_waveform)


def ising_matrix(n, J):
    lam = np.full((n, n), float(J))
    np.fill_diagonal(lam, 0.0)
    return lam


def random_waveform(rng, n_tones, duration, fmax):
    from gradient_gates.drive import DriveWaveform

    return DriveWaveform(rng.uniform(0.05, 1.0, n_tones), rng.uniform(0.0, fmax, n_tones),
                         rng.uniform(-np.pi, np.pi, n_tones), duration)


@pytest.fixture(scope="session")
def chain4():
    return chain_with_com_eta(4, 0.3)


@pytest.fixture(scope="session")
def ising4(chain4):
    """Synthesized single-drive uniform-coupling gate on four ions (J = pi/4)."""
    period = 2 * np.pi / chain4.mode_frequencies[0]
    problem = SynthesisProblem(chain4, ising_matrix(4, np.pi / 4),
                               T_bounds=(2.0 * period, 4.0 * period))
    result = synthesize_waveform(problem)
    assert result.converged
    return result


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and assert it."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
