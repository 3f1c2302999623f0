import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from gradient_gates.chain import IonChain, chain_with_com_eta
from gradient_gates.circuits import angles_to_lambda, qft_stage_targets
from gradient_gates.errors import ConfigurationError, ValidationError
from gradient_gates.synthesis import (SegmentSchedule, SignPattern, compose_segments,
                                      iterative_decomposition, lambda_from_phases,
                                      monochromatic_reference, off_diagonal, pair_vector,
                                      pairwise_isolation, schedule_lambda, single_segment_test,
                                      spin_echo_conjugate, static_lambda,
                                      static_min_time_schedule, static_pattern_matrix)

from conftest import ising_matrix

CHAIN4 = chain_with_com_eta(4, 0.3)
NU = CHAIN4.mode_frequencies
ETA_C = 0.3


def single_mode_chain():
    eta = np.zeros((4, 4))
    eta[:, 0] = ETA_C
    return IonChain(4, CHAIN4.positions, NU, CHAIN4.mode_matrix, eta, CHAIN4.params)


def pattern_strategy(n):
    return st.tuples(*[st.sampled_from([-1, 1])] * n).map(SignPattern)


# ----------------------------------------------------------------------------
# couplings from phases


def test_zero_phases_zero_coupling():
    assert np.all(lambda_from_phases(CHAIN4.eta, np.zeros(4)) == 0.0)


def test_static_phases_give_static_coupling():
    T = 1.7e-5
    lam = lambda_from_phases(CHAIN4.eta, -NU * T)
    expected = -T * np.einsum("l,jl,kl->jk", NU, CHAIN4.eta, CHAIN4.eta)
    np.testing.assert_allclose(lam, expected, rtol=1e-13)
    np.testing.assert_allclose(static_lambda(CHAIN4, T), expected, rtol=1e-13)


def test_lambda_triple_loop_oracle():
    rng = np.random.default_rng(7)
    eta, D = rng.normal(size=(4, 4)), rng.normal(size=4)
    oracle = np.zeros((4, 4))
    for j in range(4):
        for k in range(4):
            for l in range(4):
                oracle[j, k] += eta[j, l] * eta[k, l] * D[l]
    np.testing.assert_allclose(lambda_from_phases(eta, D), oracle, rtol=1e-13, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), col=st.integers(0, 3))
def test_gauge_invariance_under_mode_sign(seed, col):
    rng = np.random.default_rng(seed)
    eta, D = rng.normal(size=(4, 4)), rng.normal(size=4)
    flipped = eta.copy()
    flipped[:, col] *= -1
    np.testing.assert_allclose(off_diagonal(lambda_from_phases(flipped, D)),
                               off_diagonal(lambda_from_phases(eta, D)), atol=1e-14)


def test_mismatched_shapes_rejected():
    with pytest.raises(ValidationError):
        lambda_from_phases(np.eye(3), np.zeros(4))


# ----------------------------------------------------------------------------
# spin echo


def test_identity_and_global_flip_leave_coupling_unchanged():
    lam = ising_matrix(4, 0.3) + np.diag([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(spin_echo_conjugate(lam, SignPattern.identity(4)), lam)
    np.testing.assert_array_equal(spin_echo_conjugate(lam, SignPattern((-1,) * 4)), lam)


def test_pairwise_isolation_single_flip():
    rng = np.random.default_rng(1)
    lam1 = rng.normal(size=(4, 4))
    lam1 = lam1 + lam1.T
    total = compose_segments(pairwise_isolation(lam1, 2))
    expected = np.zeros((4, 4))
    expected[2, :] = expected[:, 2] = 2 * lam1[2, :]
    np.testing.assert_allclose(off_diagonal(total), off_diagonal(expected), atol=1e-15)
    mask = np.ones((4, 4), bool)
    mask[2, :] = mask[:, 2] = False
    np.fill_diagonal(mask, False)
    assert np.max(np.abs(total[mask])) < 1e-12


@settings(max_examples=60, deadline=None)
@given(a=pattern_strategy(5), b=pattern_strategy(5), seed=st.integers(0, 2**31))
def test_spin_echo_group_property(a, b, seed):
    lam = np.random.default_rng(seed).normal(size=(5, 5))
    np.testing.assert_array_equal(spin_echo_conjugate(spin_echo_conjugate(lam, a), b),
                                  spin_echo_conjugate(lam, a * b))
    np.testing.assert_array_equal(spin_echo_conjugate(spin_echo_conjugate(lam, a), a), lam)


def test_compose_single_identity_segment():
    lam = ising_matrix(3, 0.2)
    np.testing.assert_array_equal(compose_segments([(lam, SignPattern.identity(3))]), lam)


def test_compose_three_segments_oracle():
    rng = np.random.default_rng(3)
    segs = [(rng.normal(size=(4, 4)), SignPattern(tuple(rng.choice([-1, 1], 4))))
            for _ in range(3)]
    oracle = np.zeros((4, 4))
    for lam, pat in segs:
        s = pat.signs
        for j in range(4):
            for k in range(4):
                oracle[j, k] += s[j] * lam[j, k] * s[k]
    np.testing.assert_allclose(compose_segments(segs), oracle, atol=1e-14)


def test_compose_rejects_empty_and_mismatched():
    with pytest.raises(ValidationError):
        compose_segments([])
    with pytest.raises(ValidationError):
        compose_segments([(np.zeros((3, 3)), SignPattern.identity(3)),
                          (np.zeros((4, 4)), SignPattern.identity(4))])


def test_sign_pattern_validation_and_canonical():
    with pytest.raises(ValidationError):
        SignPattern((1, 0, -1))
    p = SignPattern((-1, 1, -1))
    assert p.canonical().signs == (1, -1, 1)
    assert SignPattern.flip(4, [1, 3]).flipped == [1, 3]


# ----------------------------------------------------------------------------
# single-segment realizability and decomposition


def test_uniform_ising_is_realizable():
    res = single_segment_test(ising_matrix(4, np.pi / 4), CHAIN4.eta)
    assert res.realizable
    lam = lambda_from_phases(CHAIN4.eta, res.phases)
    np.testing.assert_allclose(off_diagonal(lam), off_diagonal(ising_matrix(4, np.pi / 4)),
                               atol=1e-12)


def test_zero_target_realizable_with_zero_phases():
    res = single_segment_test(np.zeros((4, 4)), CHAIN4.eta)
    assert res.realizable and np.all(res.phases == 0.0)


def test_single_pair_not_realizable():
    target = np.zeros((4, 4))
    target[0, 1] = target[1, 0] = 1.0
    rotated = CHAIN4.eta.T @ target @ CHAIN4.eta
    assert np.max(np.abs(off_diagonal(rotated))) > 1e-3
    res = single_segment_test(target, CHAIN4.eta)
    assert not res.realizable
    assert res.diagonality_defect > 1e-3


def test_rank_deficient_eta_rejected():
    with pytest.raises(ConfigurationError):
        single_segment_test(ising_matrix(4, 1.0), single_mode_chain().eta)


def test_realizable_target_single_segment():
    dec = iterative_decomposition(ising_matrix(4, 0.5), CHAIN4.eta)
    assert dec.n_segments == 1 and dec.patterns[0].is_identity()
    assert dec.converged and dec.residual < 1e-12


@pytest.mark.parametrize("pair", [(0, 1), (0, 2), (1, 3)])
def test_single_pair_uses_mirrored_spin_echo(pair):
    target = np.zeros((4, 4))
    target[pair] = target[pair[::-1]] = 0.1
    dec = iterative_decomposition(target, CHAIN4.eta)
    assert dec.converged and dec.n_segments == 2
    assert dec.patterns[0].is_identity()
    assert len(dec.patterns[1].flipped) == 1
    lam1, lam2 = dec.segment_lambdas()
    np.testing.assert_allclose(lam2, -lam1, atol=1e-15)
    total = dec.composed()
    mask = ~np.eye(4, dtype=bool)
    mask[pair] = mask[pair[::-1]] = False
    assert np.max(np.abs(total[mask])) < 1e-12
    assert abs(total[pair] - 0.1) < 1e-12


def test_qft_stages_need_two_segments():
    for theta in qft_stage_targets(4):
        target = angles_to_lambda(theta)
        dec = iterative_decomposition(target, CHAIN4.eta)
        assert dec.converged and dec.n_segments == 2
        np.testing.assert_allclose(off_diagonal(dec.composed()), off_diagonal(target),
                                   atol=1e-12)


def test_decomposition_budget_exhaustion():
    target = np.zeros((4, 4))
    target[0, 1] = target[1, 0] = 1.0
    dec = iterative_decomposition(target, CHAIN4.eta, max_segments=1)
    assert not dec.converged and dec.n_segments == 1
    with pytest.raises(ValidationError):
        iterative_decomposition(target, CHAIN4.eta, max_segments=0)


# ----------------------------------------------------------------------------
# static schedules


def test_pattern_matrix_two_ions():
    C, patterns = static_pattern_matrix(2)
    assert C.shape == (1, 2)
    assert sorted(C[0].tolist()) == [-1.0, 1.0]
    for col, p in zip(C.T, patterns):
        assert p.signs[0] == 1 and col[0] == p.signs[0] * p.signs[1]


def test_pattern_matrix_four_ions():
    printed = np.array([
        [-1, -1, -1, -1, +1, +1, +1, +1],
        [-1, -1, +1, +1, -1, -1, +1, +1],
        [-1, +1, -1, +1, -1, +1, -1, +1],
        [+1, +1, -1, -1, -1, -1, +1, +1],
        [+1, -1, +1, -1, -1, +1, -1, +1],
        [+1, -1, -1, +1, +1, -1, -1, +1]])
    C, _ = static_pattern_matrix(4)
    np.testing.assert_array_equal(C, printed)


@pytest.mark.parametrize("n", [2, 3, 5, 6])
def test_pattern_matrix_has_all_ones_column(n):
    C, patterns = static_pattern_matrix(n)
    ones = [i for i, p in enumerate(patterns) if p.is_identity()]
    assert len(ones) == 1 and np.all(C[:, ones[0]] == 1)
    assert C.shape == (n * (n - 1) // 2, 2 ** (n - 1))


def test_static_lp_constant():
    J = np.pi / 4
    sched = static_min_time_schedule(CHAIN4, J)
    assert sched.feasible and sched.method == "lp"
    constant = sched.total_time * ETA_C**2 * NU[0] / J
    assert abs(constant / 4.30651 - 1) < 1e-4
    np.testing.assert_allclose(off_diagonal(schedule_lambda(CHAIN4, sched)),
                               off_diagonal(ising_matrix(4, J)), rtol=1e-9)


def test_static_lp_optimality_certificate():
    J = np.pi / 4
    sched = static_min_time_schedule(CHAIN4, J)
    C, patterns = static_pattern_matrix(4)
    lam = np.full(6, J) / pair_vector(static_lambda(CHAIN4, sched.base_duration))
    w = np.zeros(len(patterns))
    for p, x in sched.entries:
        w[patterns.index(p)] = x
    np.testing.assert_allclose(C @ w, lam, rtol=1e-9)
    ref = linprog(np.ones(len(patterns)), A_eq=C, b_eq=lam, bounds=(0, None), method="highs")
    assert ref.status == 0
    assert w.sum() <= ref.fun * (1 + 1e-9)
    # weak duality: any dual-feasible y bounds the primal from below
    y = ref.eqlin.marginals
    assert np.all(C.T @ y <= 1 + 1e-9)
    assert w.sum() >= lam @ y - 1e-9


def test_single_mode_chain_time():
    # with only the COM mode the static gradient realizes -T nu eta^2 on every pair
    chain = single_mode_chain()
    J = -np.pi / 4
    sched = static_min_time_schedule(chain, J)
    np.testing.assert_allclose(sched.total_time, abs(J) / (ETA_C**2 * NU[0]), rtol=1e-12)


def test_zero_coupling_schedule():
    sched = static_min_time_schedule(CHAIN4, 0.0)
    assert sched.entries == [] and sched.total_time == 0.0


def test_schedule_round_trip():
    sched = static_min_time_schedule(CHAIN4, 0.4)
    back = SegmentSchedule.from_dict(sched.to_dict())
    assert back.entries == sched.entries and back.total_time == sched.total_time


# ----------------------------------------------------------------------------
# single-tone reference


def test_monochromatic_duration_formula():
    ref = monochromatic_reference(CHAIN4, np.pi / 4)
    np.testing.assert_allclose(ref.duration, np.pi * np.sqrt(2) / (ETA_C * NU[0]), rtol=1e-13)


@pytest.mark.parametrize("side", ["red", "blue"])
def test_monochromatic_prediction_is_uniform(side):
    J = 0.37
    ref = monochromatic_reference(CHAIN4, J, side=side)
    np.testing.assert_allclose(off_diagonal(ref.predicted), off_diagonal(ising_matrix(4, J)),
                               rtol=1e-13)
    assert ref.coupling_sign == (-1 if side == "red" else 1)
    delta = NU[0] - ref.frequency if side == "red" else ref.frequency - NU[0]
    np.testing.assert_allclose(delta, ref.detuning, rtol=1e-13)


def test_monochromatic_scaling():
    etas = np.geomspace(0.01, 0.3, 8)
    times = [monochromatic_reference(chain_with_com_eta(4, e), np.pi / 4).duration
             for e in etas]
    static = [static_min_time_schedule(chain_with_com_eta(4, e), np.pi / 4).total_time
              for e in etas]
    assert abs(np.polyfit(np.log(etas), np.log(times), 1)[0] + 1) < 0.02
    assert abs(np.polyfit(np.log(etas), np.log(static), 1)[0] + 2) < 0.02


def test_monochromatic_invalid():
    with pytest.raises(ValidationError):
        monochromatic_reference(CHAIN4, -1.0)
    with pytest.raises(ValidationError):
        monochromatic_reference(CHAIN4, 1.0, side="green")
    with pytest.raises(ConfigurationError):
        monochromatic_reference(CHAIN4, 1.0, mode=2)
