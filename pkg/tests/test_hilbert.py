from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jpmreadout.errors import DimensionMismatch, NumericalError, TruncationError
from jpmreadout.hilbert import (
    E,
    G,
    M,
    HilbertLayout,
    Operator,
    QuantumState,
    basis,
    coherent_state,
    create,
    destroy,
    displacement,
    embed,
    fock_cutoff,
    identity,
    jpm_sigma_z,
    number,
    partial_trace,
    product_state,
    psd_sqrt,
    sigma_minus,
    sigma_plus,
    sigma_z,
    state_fidelity,
)

complex_amp = st.builds(
    lambda r, t: r * np.exp(1j * t),
    st.floats(0.0, 3.0),
    st.floats(0.0, 2 * np.pi),
)


class TestLayout:
    @pytest.mark.parametrize("q,j,factor", [(False, False, 1), (True, False, 2), (False, True, 3), (True, True, 6)])
    def test_dimension(self, q, j, factor):
        assert HilbertLayout(7, q, j).dim == 7 * factor

    def test_order_is_fixed(self):
        lay = HilbertLayout(4, True, True)
        assert lay.subsystems == ("cavity", "qubit", "jpm")
        assert lay.dims == (4, 2, 3)

    def test_invalid_fock(self):
        with pytest.raises(ValueError):
            HilbertLayout(0)

    def test_frozen(self):
        lay = HilbertLayout(4)
        with pytest.raises(AttributeError):
            lay.n_fock = 5


class TestOperators:
    def test_destroy_action(self):
        n = 9
        a = destroy(n)
        for k in range(1, n):
            np.testing.assert_array_equal(a @ basis(n, k), np.sqrt(k) * basis(n, k - 1))
        np.testing.assert_array_equal(a @ basis(n, 0), np.zeros(n))

    def test_number_and_create(self):
        n = 6
        np.testing.assert_allclose(create(n) @ destroy(n), number(n), atol=1e-15)

    def test_commutator_below_top(self):
        lay = HilbertLayout(8, True, True)
        a = embed(destroy(8), "cavity", lay).matrix
        comm = a @ a.conj().T - a.conj().T @ a
        keep = np.repeat(np.arange(8), 6) < 7
        np.testing.assert_allclose(comm[np.ix_(keep, keep)], np.eye(keep.sum()), atol=1e-14)

    def test_qubit_conventions(self):
        # |1> is excited: sigma_z|1> = -|1>, sigma_+ raises |0> to |1>
        np.testing.assert_array_equal(sigma_z(), np.diag([1.0, -1.0]))
        np.testing.assert_array_equal(sigma_plus() @ basis(2, 0), basis(2, 1))
        np.testing.assert_array_equal(sigma_minus(), sigma_plus().conj().T)

    def test_jpm_sigma_z(self):
        np.testing.assert_array_equal(np.diag(jpm_sigma_z()), [1.0, -1.0, 0.0])
        assert (G, E, M) == (0, 1, 2)

    def test_embed_identity(self):
        lay = HilbertLayout(5, True, True)
        np.testing.assert_array_equal(embed(np.eye(2), "qubit", lay).matrix, identity(lay).matrix)

    def test_embed_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            embed(np.eye(3), "qubit", HilbertLayout(5, True, True))

    def test_embedded_factors_commute(self):
        lay = HilbertLayout(6, True, True)
        ops = [
            embed(destroy(6), "cavity", lay).matrix,
            embed(sigma_plus(), "qubit", lay).matrix,
            embed(np.eye(3)[:, [1, 2, 0]], "jpm", lay).matrix,
        ]
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.max(np.abs(ops[i] @ ops[j] - ops[j] @ ops[i])) < 1e-14

    @given(st.integers(0, 2))
    @settings(max_examples=10, deadline=None)
    def test_embed_preserves_spectrum(self, which):
        lay = HilbertLayout(3, True, True)
        local = [np.diag([0.0, 1.0, 2.0]), sigma_z(), jpm_sigma_z(0.7)][which]
        sub = ["cavity", "qubit", "jpm"][which]
        ev = np.sort(np.linalg.eigvalsh(embed(local, sub, lay).matrix))
        mult = lay.dim // local.shape[0]
        expected = np.sort(np.repeat(np.linalg.eigvalsh(local), mult))
        np.testing.assert_allclose(ev, expected, atol=1e-14)

    def test_operator_layout_check(self):
        with pytest.raises(DimensionMismatch):
            Operator(np.eye(3), HilbertLayout(2, False, False))
        with pytest.raises(DimensionMismatch):
            Operator(np.eye(2), HilbertLayout(2, False, False)) + Operator(np.eye(4), HilbertLayout(2, True, False))

    def test_hermiticity_flag(self):
        op = Operator(np.array([[0, 1], [1, 0]]), HilbertLayout(2, False, False))
        assert op.is_hermitian()
        assert not Operator(destroy(2), HilbertLayout(2, False, False)).is_hermitian()


class TestCoherentStates:
    def test_vacuum(self):
        psi = coherent_state(0.0, 10).data
        np.testing.assert_array_equal(psi, basis(10, 0))

    def test_mean_photon_number(self):
        # Poisson mean, independent of the recursion used to build the state
        psi = coherent_state(np.sqrt(10), 40).data
        n = np.arange(40)
        assert abs(np.sum(n * np.abs(psi) ** 2) - 10.0) < 1e-6

    def test_vacuum_weight(self):
        psi = coherent_state(1.0, 12).data
        assert abs(abs(psi[0]) ** 2 - np.exp(-1)) < 1e-9

    def test_truncation_error(self):
        with pytest.raises(TruncationError):
            coherent_state(3.0, 10)

    def test_cutoff_rule(self):
        assert fock_cutoff(np.sqrt(10)) == int(np.ceil(10 + 6 * np.sqrt(10) + 10))

    @given(complex_amp)
    @settings(max_examples=25, deadline=None)
    def test_coefficients_match_poisson(self, alpha):
        n = fock_cutoff(alpha)
        psi = coherent_state(alpha, n).data
        ref = np.array([np.exp(-abs(alpha) ** 2 / 2) * alpha**k / np.sqrt(float(factorial(k))) for k in range(n)])
        np.testing.assert_allclose(psi, ref / np.linalg.norm(ref), atol=1e-12)

    def test_displacement_zero_is_identity(self):
        np.testing.assert_array_equal(displacement(0.0, 7).matrix, np.eye(7))

    def test_displacement_of_vacuum(self):
        n = fock_cutoff(2.0)
        out = displacement(2.0, n).matrix @ basis(n, 0)
        assert state_fidelity(out, coherent_state(2.0, n).data) > 1 - 1e-8

    def test_displacement_inverse(self):
        n = fock_cutoff(1.5) + 5
        out = displacement(-1.5, n).matrix @ coherent_state(1.5, n).data
        assert state_fidelity(out, basis(n, 0)) > 1 - 1e-8

    @given(complex_amp)
    @settings(max_examples=20, deadline=None)
    def test_displacement_unitary_on_low_subspace(self, beta):
        n = fock_cutoff(beta)
        d = displacement(beta, n).matrix
        # the cutoff is sized for displacing the vacuum; keep the lowest few columns
        k = 3
        low = d[:, :k]
        np.testing.assert_allclose(low.conj().T @ low, np.eye(k), atol=1e-6)


class TestStates:
    def test_pure_validation(self):
        with pytest.raises(ValueError):
            QuantumState(np.array([1.0, 1.0]), HilbertLayout(2, False, False)).validate()

    def test_density_validation(self):
        bad = np.array([[0.5, 0.6], [0.6, 0.5]])  # eigenvalue -0.1
        with pytest.raises(ValueError):
            QuantumState(bad, HilbertLayout(2, False, False)).validate()

    def test_product_state_and_expectation(self):
        lay = HilbertLayout(40, True, True)
        psi = product_state(lay, cavity=coherent_state(np.sqrt(10), 40))
        assert abs(psi.expect(embed(number(40), "cavity", lay)) - 10.0) < 1e-6

    def test_partial_trace(self):
        lay = HilbertLayout(3, True, True)
        psi = product_state(lay, cavity=basis(3, 2), qubit=np.array([0.6, 0.8]), jpm=basis(3, 1))
        rq = partial_trace(psi.density_matrix(), lay, ["qubit"])
        np.testing.assert_allclose(rq, np.outer([0.6, 0.8], [0.6, 0.8]), atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            QuantumState(np.zeros(5), HilbertLayout(2, True, False))

    def test_fidelity_pure_mixed(self):
        psi = np.array([1.0, 0.0])
        assert abs(state_fidelity(psi, np.eye(2) / 2) - 0.5) < 1e-12

    def test_psd_sqrt_rejects_negative(self):
        with pytest.raises(NumericalError):
            psd_sqrt(np.diag([1.0, -1e-3]))
        np.testing.assert_allclose(psd_sqrt(np.diag([4.0, -1e-12])), np.diag([2.0, 0.0]))
