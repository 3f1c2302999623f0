import numpy as np
import pytest

from gradient_gates.chain import chain_with_com_eta
from gradient_gates.circuits import (angles_to_lambda, compile_qft, compile_rainbow,
                                     compile_swap_layer, controlled_phase, lambda_to_angles,
                                     mirror_pairs, qft_matrix, qft_phase_angles,
                                     qft_stage_rz, qft_stage_targets, qft_textbook_circuit,
                                     rainbow_angles, singlet_product_state)
from gradient_gates.errors import ValidationError
from gradient_gates.sequence import (GateSequence, IdealSegment, LocalGate, apply_local,
                                     phase_aligned_distance, sequence_unitary,
                                     zz_unitary_diagonal)
from gradient_gates.simulator import entanglement_entropy

CHAIN4 = chain_with_com_eta(4, 0.3)


def local_unitary(gates, n):
    U = np.eye(2**n, dtype=complex)
    for g in gates:
        U = apply_local(U, g, n)
    return U


def zz_angle_unitary(theta):
    return np.diag(zz_unitary_diagonal(angles_to_lambda(theta)))


def basis_state(bits):
    psi = np.zeros(2 ** len(bits), dtype=complex)
    psi[int(bits, 2)] = 1.0
    return psi


# ----------------------------------------------------------------------------
# stage targets


def test_stage_one_entries_four_qubits():
    theta = qft_stage_targets(4)[0]
    expected = np.zeros((4, 4))
    for k, value in zip((1, 2, 3), (np.pi / 8, np.pi / 16, np.pi / 32)):
        expected[0, k] = expected[k, 0] = value
    np.testing.assert_allclose(theta, expected, rtol=1e-15)


def test_two_qubit_stage():
    (theta,) = qft_stage_targets(2)
    np.testing.assert_allclose(theta, [[0, np.pi / 8], [np.pi / 8, 0]])


@pytest.mark.parametrize("n", [2, 3, 5])
def test_last_stage_single_pair(n):
    theta = qft_stage_targets(n)[-1]
    nz = np.argwhere(np.triu(theta) != 0)
    assert nz.tolist() == [[n - 2, n - 1]]


def test_angle_lambda_conversion():
    theta = qft_stage_targets(3)[0]
    np.testing.assert_allclose(lambda_to_angles(angles_to_lambda(theta)), theta)
    # exp(+i theta Z1 Z2) for one pair
    U = zz_angle_unitary(np.array([[0, 0.3], [0.3, 0]]))
    np.testing.assert_allclose(np.diag(U), np.exp(0.3j * np.array([1, -1, -1, 1])))


# ----------------------------------------------------------------------------
# gate identities


@pytest.mark.parametrize("n", [2, 3, 4])
def test_phase_folding_per_stage(n):
    phi = qft_phase_angles(n)
    for stage, theta in enumerate(qft_stage_targets(n)):
        compiled = local_unitary(qft_stage_rz(n, stage), n) @ zz_angle_unitary(theta)
        ideal = np.eye(2**n, dtype=complex)
        bits = (np.arange(2**n)[:, None] >> np.arange(n - 1, -1, -1)) & 1
        for k in range(stage + 1, n):
            ideal = np.diag(np.exp(1j * phi[stage, k] * bits[:, stage] * bits[:, k])) @ ideal
        assert phase_aligned_distance(compiled, ideal) < 1e-8


def test_cnot_from_zz():
    cnot = np.eye(4)[[0, 1, 3, 2]]
    h_target = local_unitary([LocalGate("H", 1)], 2)
    ss = local_unitary([LocalGate("S", 0), LocalGate("S", 1)], 2)
    zz = zz_angle_unitary(np.array([[0, np.pi / 4], [np.pi / 4, 0]]))
    assert phase_aligned_distance(h_target @ zz @ ss @ h_target, cnot) < 1e-12


@pytest.mark.parametrize("g", [0.1, np.pi / 4, 1.3])
def test_xx_from_zz_conjugation(g):
    X = np.array([[0, 1], [1, 0]])
    XX = np.kron(X, X)
    xx = np.cos(g) * np.eye(4) + 1j * np.sin(g) * XX
    hh = local_unitary([LocalGate("H", 0), LocalGate("H", 1)], 2)
    zz = zz_angle_unitary(np.array([[0, g], [g, 0]]))
    np.testing.assert_allclose(hh @ zz @ hh, xx, atol=1e-12)


def test_controlled_phase_matrix():
    np.testing.assert_allclose(controlled_phase(np.pi), np.diag([1, 1, 1, -1]))


# ----------------------------------------------------------------------------
# QFT


def test_textbook_circuit_matches_definition():
    for n in (1, 2, 3, 4):
        assert phase_aligned_distance(qft_textbook_circuit(n), qft_matrix(n)) < 1e-12


def test_qft2_against_explicit_matrix():
    H = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
    swap = np.eye(4)[[0, 2, 1, 3]]
    textbook = (swap @ np.kron(np.eye(2), H) @ controlled_phase(np.pi / 2)
                @ np.kron(H, np.eye(2)))
    U = sequence_unitary(compile_qft(2), 2)
    assert phase_aligned_distance(U, textbook) < 1e-8


@pytest.mark.parametrize("swap_mode", ["local", "rainbow"])
def test_qft4_unitary(swap_mode):
    U = sequence_unitary(compile_qft(4, swap_mode=swap_mode), 4)
    assert phase_aligned_distance(U, qft_matrix(4)) < 1e-12


def test_qft4_with_chain_decomposition():
    seq = compile_qft(4, chain=CHAIN4)
    assert sum(isinstance(e, IdealSegment) for e in seq) == 6
    U = sequence_unitary(seq, 4, CHAIN4)
    assert phase_aligned_distance(U, qft_matrix(4)) < 1e-12


def test_qft4_phases_on_one():
    out = sequence_unitary(compile_qft(4), 4) @ basis_state("0001")
    np.testing.assert_allclose(np.abs(out), 0.25, atol=1e-12)
    phases = np.angle(out / out[0])
    expected = np.pi * np.arange(16) / 8
    np.testing.assert_allclose(np.angle(np.exp(1j * (phases - expected))), 0.0, atol=1e-6)


def test_qft_of_zero_state():
    out = sequence_unitary(compile_qft(3), 3) @ basis_state("000")
    out = out * np.exp(-1j * np.angle(out[0]))
    np.testing.assert_allclose(out, np.full(8, 1 / np.sqrt(8)), atol=1e-12)


def test_invalid_qft_inputs():
    with pytest.raises(ValidationError):
        qft_stage_targets(1)
    with pytest.raises(ValidationError):
        compile_qft(3, swap_mode="sideways")


# ----------------------------------------------------------------------------
# mirror pairs


def test_mirror_pair_angles():
    np.testing.assert_allclose(rainbow_angles(2), [[0, np.pi / 4], [np.pi / 4, 0]])
    theta = rainbow_angles(4)
    nz = {tuple(p) for p in np.argwhere(np.triu(theta) != 0)}
    assert nz == {(0, 3), (1, 2)}
    assert mirror_pairs(5) == [(0, 4), (1, 3)]


def test_swap_layer_two_qubits():
    seq = GateSequence(compile_swap_layer(2))
    swap = np.eye(4)[[0, 2, 1, 3]]
    assert phase_aligned_distance(sequence_unitary(seq, 2), swap) < 1e-12


def test_swap_layer_reverses_four_qubits():
    U = sequence_unitary(GateSequence(compile_swap_layer(4)), 4)
    ref = local_unitary([LocalGate("SWAP", (0, 3)), LocalGate("SWAP", (1, 2))], 4)
    assert phase_aligned_distance(U, ref) < 1e-12


def test_two_ion_singlet():
    out = sequence_unitary(compile_rainbow(2), 2) @ basis_state("00")
    singlet = np.array([0, 1, -1, 0]) / np.sqrt(2)
    assert abs(np.vdot(singlet, out)) ** 2 > 1 - 1e-8


def test_four_ion_rainbow_entanglement():
    out = sequence_unitary(compile_rainbow(4), 4) @ basis_state("0000")
    assert abs(np.vdot(singlet_product_state(4), out)) ** 2 > 1 - 1e-12
    rho = np.outer(out, out.conj())
    assert abs(entanglement_entropy(rho, [0, 3], 4)) < 1e-8
    assert abs(entanglement_entropy(rho, [0], 4) - 1) < 1e-8
    assert abs(entanglement_entropy(rho, [0, 1], 4) - 2) < 1e-8


def test_rainbow_with_chain_decomposition():
    seq = compile_rainbow(4, chain=CHAIN4)
    out = sequence_unitary(seq, 4, CHAIN4) @ basis_state("0000")
    assert abs(np.vdot(singlet_product_state(4), out)) ** 2 > 1 - 1e-12


def test_zero_coupling_gives_product_state():
    seq = compile_rainbow(4, J=0.0)
    out = sequence_unitary(seq, 4) @ basis_state("0000")
    rho = np.outer(out, out.conj())
    for ion in range(4):
        assert abs(entanglement_entropy(rho, [ion], 4)) < 1e-10


def test_odd_rainbow_rejected():
    with pytest.raises(ValidationError):
        compile_rainbow(3)
    with pytest.raises(ValidationError):
        singlet_product_state(3)
    seq = compile_rainbow(3, mode="pairwise")
    assert isinstance(seq, GateSequence)
