import json

import numpy as np
import pytest

from gradient_gates import SynthesisProblem, chain_with_com_eta, synthesize_waveform
from gradient_gates.circuits import angles_to_lambda, qft_stage_targets
from gradient_gates.drive import (OSCILLATING, DriveWaveform, accumulated_phases,
                                  closure_defect, max_abs_f)
from gradient_gates.errors import ValidationError
from gradient_gates.optimizer import (SynthesisResult, harmonic_grid, scale_tone_budget,
                                      synthesize_sequence)
from gradient_gates.synthesis import lambda_from_phases, off_diagonal

from conftest import ising_matrix

CHAIN3 = chain_with_com_eta(3, 0.1)
PERIOD3 = 2 * np.pi / CHAIN3.mode_frequencies[0]


def small_problem(**kw):
    opts = dict(T_bounds=(2 * PERIOD3, 10 * PERIOD3), duration_step=0.5)
    opts.update(kw)
    return SynthesisProblem(CHAIN3, ising_matrix(3, 0.05), **opts)


def test_zero_target_gives_zero_waveform():
    res = synthesize_waveform(SynthesisProblem(CHAIN3, np.zeros((3, 3))))
    assert res.converged
    assert np.all(res.waveform.amplitudes == 0.0)
    assert res.target_residual_norm == 0.0 and res.boundary_residual_norm == 0.0


def test_too_few_tones_rejected():
    with pytest.raises(ValidationError):
        SynthesisProblem(CHAIN3, ising_matrix(3, 0.05), n_tones=5)


def test_unrealizable_target_rejected():
    target = np.zeros((3, 3))
    target[0, 1] = target[1, 0] = 0.1
    with pytest.raises(ValidationError):
        synthesize_waveform(SynthesisProblem(CHAIN3, target))


def test_tone_budget_scaling():
    chain20 = chain_with_com_eta(20, 0.2)
    problem = SynthesisProblem(chain20, ising_matrix(20, 0.01))
    assert scale_tone_budget(problem, 120 / 41).n_tones == 120
    chain4 = chain_with_com_eta(4, 0.3)
    base = SynthesisProblem(chain4, ising_matrix(4, 0.1))
    assert scale_tone_budget(base, 1.0).n_tones == 9
    pinned = SynthesisProblem(chain4, ising_matrix(4, 0.1), n_tones=12)
    assert scale_tone_budget(pinned, 1.0).n_tones == 12
    with pytest.raises(ValidationError):
        scale_tone_budget(base, 0.5)


def test_harmonic_grid_properties():
    nu = CHAIN3.mode_frequencies
    T = 3 * PERIOD3
    guard = 0.02 * nu[0]
    idx, freqs = harmonic_grid(T, nu, 0.3 * nu[0], 2 * nu[-1], guard)
    np.testing.assert_allclose(freqs, idx * 2 * np.pi / T, rtol=1e-15)
    assert np.all((freqs >= 0.3 * nu[0]) & (freqs <= 2 * nu[-1]))
    assert np.all(np.min(np.abs(freqs[:, None] - nu[None, :]), axis=1) > guard)
    # T is a multiple of the COM period, so its harmonic must be excluded
    assert 3 not in idx
    _, fixed = harmonic_grid(T, nu, 0.3 * nu[0], 2 * nu[-1], guard, n_tones=4)
    np.testing.assert_array_equal(fixed, freqs[:4])


def test_small_problem_converges_with_invariants():
    res = synthesize_waveform(small_problem())
    assert res.converged
    w = res.waveform
    assert max_abs_f(w) <= 1 + 1e-9
    assert np.max(closure_defect(w, CHAIN3, OSCILLATING)) < 1e-7
    lam = lambda_from_phases(CHAIN3.eta, res.achieved_D)
    np.testing.assert_allclose(off_diagonal(lam), off_diagonal(ising_matrix(3, 0.05)),
                               atol=1e-8)
    assert all(len(entry) == 3 for entry in res.scan)


def test_result_round_trip_reproduces_phases():
    res = synthesize_waveform(small_problem())
    back = SynthesisResult.from_dict(json.loads(json.dumps(res.to_dict())))
    D = accumulated_phases(back.waveform, CHAIN3)
    np.testing.assert_allclose(D, res.achieved_D, rtol=1e-10, atol=1e-12)
    assert back.converged == res.converged


def test_determinism():
    a = synthesize_waveform(small_problem(rng_seed=3))
    b = synthesize_waveform(small_problem(rng_seed=3))
    np.testing.assert_array_equal(a.waveform.quadratures(), b.waveform.quadratures())
    np.testing.assert_array_equal(a.waveform.frequencies, b.waveform.frequencies)
    assert a.waveform.duration == b.waveform.duration


def test_phase_vector_target():
    D = np.array([-0.02, 0.01, 0.005])
    res = synthesize_waveform(SynthesisProblem(CHAIN3, D, duration=4 * PERIOD3))
    assert res.converged
    np.testing.assert_allclose(res.achieved_D, D, atol=1e-8)


def test_free_frequency_mode_pinned_duration():
    res = synthesize_waveform(small_problem(frequency_mode="free", duration=2.5 * PERIOD3,
                                            multistart_count=4))
    assert res.converged
    assert res.waveform.n_tones == 7
    assert max_abs_f(res.waveform) <= 1 + 1e-9


def test_ising_waveform_invariants(chain4, ising4):
    w = ising4.waveform
    period = 2 * np.pi / chain4.mode_frequencies[0]
    assert w.duration / period <= 3.0 + 1e-9
    assert max_abs_f(w) <= 1 + 1e-9
    assert np.max(closure_defect(w, chain4, OSCILLATING)) < 1e-7
    lam = lambda_from_phases(chain4.eta, ising4.achieved_D)
    np.testing.assert_allclose(off_diagonal(lam), off_diagonal(ising_matrix(4, np.pi / 4)),
                               atol=1e-8)
    back = DriveWaveform.from_dict(json.loads(json.dumps(w.to_dict())))
    np.testing.assert_allclose(accumulated_phases(back, chain4), ising4.achieved_D,
                               rtol=1e-10)


def test_single_pair_sequence(chain4):
    period = 2 * np.pi / chain4.mode_frequencies[0]
    target = np.zeros((4, 4))
    target[0, 2] = target[2, 0] = np.pi / 8
    seq, dec = synthesize_sequence(target, chain4, T_bounds=(period, 8 * period),
                                   duration_step=0.5)
    segments = seq.segments()
    assert len(segments) == 2
    total = sum(s.effective_lambda(chain4) for s in segments)
    assert np.max(np.abs(off_diagonal(total - target))) < 1e-8


def test_qft_stage_sequence(chain4):
    period = 2 * np.pi / chain4.mode_frequencies[0]
    target = angles_to_lambda(qft_stage_targets(4)[0])
    seq, dec = synthesize_sequence(target, chain4, T_bounds=(period, 8 * period),
                                   duration_step=0.5)
    segments = seq.segments()
    assert len(segments) == 2
    assert not segments[1].pattern.is_identity()
    composed = sum(s.effective_lambda(chain4) for s in segments)
    np.testing.assert_allclose(off_diagonal(composed), off_diagonal(target), atol=1e-8)
