from math import pi, sqrt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jpmreadout.errors import DimensionMismatch, StepSizeError, TruncationError
from jpmreadout.evolve import (
    IntegratorConfig,
    evolve_exact,
    evolve_lindblad,
    evolve_schrodinger,
    propagator,
)
from jpmreadout.hilbert import E, G, M, HilbertLayout, QuantumState, basis, coherent_state, embed, sigma_z
from jpmreadout.model import PulseSchedule, SystemParams, build_dissipators, hamiltonian
from jpmreadout.protocol import pointer_amplitudes

JPM = HilbertLayout(1, False, True)
CJ = HilbertLayout(3, False, True)


def _jpm_only(**rates):
    p = SystemParams(g_j=0.0, **{k: rates.get(k, 0.0) for k in ("gamma_j", "gamma_d", "gamma_r")})
    return p, hamiltonian(p, JPM, "measure", qubit_state_branch=1), build_dissipators(p, JPM)


def _cfg(**kw):
    return IntegratorConfig(store_states=False, **kw)


class TestConfig:
    def test_defaults(self):
        c = IntegratorConfig()
        assert (c.method, c.dt, c.record_interval, c.hermitize_every) == ("rk4_fixed", 1e-12, 0.5e-9, 100)

    @pytest.mark.parametrize("kw", [{"method": "euler"}, {"dt": 0.0}, {"record_stride": 0}, {"backend": "gpu"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            IntegratorConfig(**kw)


class TestLindblad:
    def test_exponential_decay(self):
        g = 2e8
        _, h, ds = _jpm_only(gamma_r=g)
        t = 3 / g
        tr = evolve_lindblad(QuantumState(basis(3, E), JPM), h, ds, t, _cfg(), check_fock=False)
        assert abs(tr.observables["p_e"][-1] - np.exp(-3)) < 1e-6
        np.testing.assert_allclose(tr.observables["p_e"], np.exp(-g * tr.times), atol=1e-9)

    def test_vacuum_rabi_swap(self):
        p = SystemParams(gamma_j=0.0, gamma_d=0.0, gamma_r=0.0)
        h = hamiltonian(p, CJ, "measure", qubit_state_branch=1)
        psi = np.kron(basis(3, 1), basis(3, G))
        t = pi / (2 * p.g_j)
        tr = evolve_lindblad(QuantumState(psi, CJ), h, build_dissipators(p, CJ), t, _cfg(), check_fock=False)
        assert tr.observables["p_e"][-1] > 1 - 1e-6

    def test_branching_ratio(self):
        _, h, ds = _jpm_only(gamma_j=2e8, gamma_r=2e8)
        tr = evolve_lindblad(QuantumState(basis(3, E), JPM), h, ds, 20 / 4e8, _cfg(), check_fock=False)
        assert abs(tr.observables["p_m"][-1] - 0.5) < 1e-8

    def test_physicality_observables(self):
        p = SystemParams()
        h = hamiltonian(p, CJ, "measure", qubit_state_branch=1)
        rho = np.kron(np.diag([0.5, 0.5, 0.0]), np.diag([1.0, 0, 0]))
        tr = evolve_lindblad(QuantumState(rho, CJ), h, build_dissipators(p, CJ), 5e-9, _cfg(), check_fock=False)
        obs = tr.observables
        assert np.all(np.abs(obs["trace"] - 1) < 1e-8)
        assert np.all(obs["min_eig"] > -1e-8)
        assert np.all(obs["hermiticity"] < 1e-10)
        assert np.all(np.diff(tr.times) > 0)
        assert all(len(v) == len(tr.times) for v in obs.values())

    def test_closed_system_conserves_energy(self):
        p = SystemParams(gamma_j=0.0, gamma_d=0.0, gamma_r=0.0)
        lay = HilbertLayout(14, False, True)
        h = hamiltonian(p, lay, "measure", qubit_state_branch=1)
        psi = np.kron(coherent_state(1.0, 14).data, basis(3, G))
        e = {"energy": lambda r: np.trace(h.matrix @ r).real}
        tr = evolve_lindblad(QuantumState(psi, lay), h, (), 10e-9, _cfg(), observables=e)
        en = np.asarray(tr.observables["energy"])
        assert np.max(np.abs(en - en[0])) <= 1e-8 * np.max(np.abs(np.linalg.eigvalsh(h.matrix)))

    def test_matches_exact_propagator(self):
        p = SystemParams(gamma_j=0.0, gamma_d=0.0, gamma_r=0.0)
        h = hamiltonian(p, CJ, "measure", qubit_state_branch=1)
        psi = QuantumState(np.kron(basis(3, 1), basis(3, G)), CJ)
        tr = evolve_lindblad(psi, h, (), 3e-9, _cfg(), check_fock=False)
        ref = evolve_exact(psi.density_matrix(), h, 3e-9)
        assert np.max(np.abs(tr.final.data - ref)) < 1e-10

    def test_step_bound(self):
        _, h, ds = _jpm_only(gamma_r=1e12)
        with pytest.raises(StepSizeError):
            evolve_lindblad(QuantumState(basis(3, E), JPM), h, ds, 1e-9, _cfg(), check_fock=False)

    def test_truncation(self):
        p = SystemParams(gamma_j=0.0, gamma_d=0.0, gamma_r=0.0)
        h = hamiltonian(p, CJ, "measure", qubit_state_branch=1)
        psi = np.kron(basis(3, 2), basis(3, G))
        with pytest.raises(TruncationError):
            evolve_lindblad(QuantumState(psi, CJ), h, (), 1e-9, _cfg())

    def test_dimension_mismatch(self):
        _, h, ds = _jpm_only()
        with pytest.raises(DimensionMismatch):
            evolve_lindblad(np.eye(2) / 2, h, ds, 1e-9, _cfg())

    def test_record_times(self):
        _, h, ds = _jpm_only(gamma_r=1e8)
        t = [1e-9, 2e-9, 5e-9]
        tr = evolve_lindblad(QuantumState(basis(3, E), JPM), h, ds, 5e-9, _cfg(), times=t, check_fock=False)
        np.testing.assert_array_equal(tr.times, t)
        np.testing.assert_allclose(tr.observables["p_e"], np.exp(-1e8 * np.array(t)), atol=1e-12)

    def test_backends_agree(self):
        p = SystemParams()
        lay = HilbertLayout(17, False, True)
        h = hamiltonian(p, lay, "measure", qubit_state_branch=1)
        ds = build_dissipators(p, lay)
        psi = QuantumState(np.kron(coherent_state(1.0, 17).data, basis(3, G)), lay)
        out = [
            evolve_lindblad(psi, h, ds, 2e-9, _cfg(backend=b)).final.data
            for b in ("numpy", "auto")
        ]
        assert np.max(np.abs(out[0] - out[1])) < 1e-13

    def test_rk4_order(self):
        p = SystemParams()
        lay = HilbertLayout(17, False, True)
        h = hamiltonian(p, lay, "measure", qubit_state_branch=1)
        ds = build_dissipators(p, lay)
        psi = QuantumState(np.kron(coherent_state(1.0, 17).data, basis(3, G)), lay)
        base = _cfg(check_step_bound=False, retry=False)
        f = [
            evolve_lindblad(psi, h, ds, 1e-9, base.replace(dt=dt), times=[1e-9]).final.data
            for dt in (40e-12, 20e-12, 10e-12)
        ]
        ratio = np.max(np.abs(f[0] - f[1])) / np.max(np.abs(f[1] - f[2]))
        assert 12 <= ratio <= 20

    def test_adaptive_matches_fixed(self):
        _, h, ds = _jpm_only(gamma_j=2e8, gamma_r=1e8, gamma_d=1e6)
        psi = QuantumState(basis(3, E), JPM)
        a = evolve_lindblad(psi, h, ds, 10e-9, _cfg(), check_fock=False)
        b = evolve_lindblad(psi, h, ds, 10e-9, _cfg(method="rk45_adaptive"), check_fock=False)
        assert np.max(np.abs(a.final.data - b.final.data)) < 1e-8


@given(
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 2 * np.pi),
)
@settings(max_examples=10, deadline=None)
def test_linearity(w, r, phi):
    p = SystemParams()
    lay = HilbertLayout(3, False, True)
    h = hamiltonian(p, lay, "measure", qubit_state_branch=1)
    ds = build_dissipators(p, lay)
    psi1 = np.kron(basis(3, 1), basis(3, G))
    psi2 = np.kron(np.array([sqrt(1 - r), sqrt(r) * np.exp(1j * phi), 0.0]), basis(3, E))
    r1, r2 = np.outer(psi1, psi1.conj()), np.outer(psi2, psi2.conj())
    cfg = _cfg()

    def run(rho):
        return evolve_lindblad(QuantumState(rho, lay), h, ds, 2e-9, cfg, times=[2e-9], check_fock=False).final.data

    mix = run(w * r1 + (1 - w) * r2)
    assert np.max(np.abs(mix - (w * run(r1) + (1 - w) * run(r2)))) < 1e-9


@given(st.floats(0.0, 1.0), st.floats(0.0, 2 * np.pi), st.floats(0.5e-9, 5e-9))
@settings(max_examples=10, deadline=None)
def test_trajectory_stays_physical(theta, phi, t):
    p = SystemParams()
    lay = HilbertLayout(4, True, True)
    h = hamiltonian(p, lay, "measure")
    ds = build_dissipators(p, lay)
    q = np.array([np.cos(theta), np.sin(theta) * np.exp(1j * phi)])
    psi = np.kron(np.kron(basis(4, 1), q), basis(3, G))
    tr = evolve_lindblad(QuantumState(psi, lay), h, ds, t, _cfg())
    obs = tr.observables
    assert np.max(np.abs(obs["trace"] - 1)) < 1e-8
    assert np.min(obs["min_eig"]) > -1e-8
    assert np.max(obs["hermiticity"]) < 1e-10


class TestSchrodinger:
    @staticmethod
    def _drive(branch, duration=100e-9):
        p = SystemParams()
        s = PulseSchedule.from_params(p)
        n = 30
        lay = HilbertLayout(n, False, False)
        h = hamiltonian(p, lay, "drive", qubit_state_branch=branch, schedule=s)
        t = np.linspace(0, duration, 11)[1:]
        tr = evolve_schrodinger(QuantumState(basis(n, 0), lay), h, duration, IntegratorConfig(), times=t)
        a = embed(np.diag(np.sqrt(np.arange(1, n)), 1), "cavity", lay).matrix
        alpha = np.array([np.vdot(x.data, a @ x.data) for x in tr.states])
        return p, s, t, alpha

    def test_resonant_branch(self):
        p, s, t, alpha = self._drive(1)
        np.testing.assert_allclose(alpha, -0.5j * s.a0 * t, rtol=1e-6)

    def test_detuned_branch(self):
        p, s, t, alpha = self._drive(0)
        # detuning +2 chi_Q in the drive frame: d alpha/dt = -i (2 chi alpha + a0 / 2)
        ref = (s.a0 / (4 * p.chi_q)) * (np.exp(-2j * p.chi_q * t) - 1)
        np.testing.assert_allclose(alpha, ref, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(np.abs(alpha) ** 2, (s.a0 / (2 * p.chi_q)) ** 2 * np.sin(p.chi_q * t) ** 2,
                                   rtol=1e-6, atol=1e-12)
        a0, a1 = pointer_amplitudes(p, t, s)
        np.testing.assert_allclose(alpha, a0, rtol=1e-6, atol=1e-9)

    def test_zero_drive_unchanged(self):
        # resonant branch without drive: the rotating-frame Hamiltonian vanishes
        p = SystemParams(drive_amp=0.0)
        lay = HilbertLayout(10, False, False)
        h = hamiltonian(p, lay, "drive", qubit_state_branch=1)
        psi = QuantumState(coherent_state(0.5, 10).data, lay)
        assert np.max(np.abs(h.matrix)) < 1e-14 * SystemParams().omega_c * 10  # roundoff of w_C - chi_Q + chi_J - w_d
        tr = evolve_schrodinger(psi, h, 5e-9, IntegratorConfig())
        np.testing.assert_allclose(tr.final.data, psi.data, atol=1e-12)

    def test_norm_and_agreement_with_lindblad(self):
        p = SystemParams()
        lay = HilbertLayout(6, True, True)
        h = hamiltonian(p, lay, "measure")
        q = np.array([1, 1]) / sqrt(2)
        psi = QuantumState(np.kron(np.kron(basis(6, 1), q), basis(3, G)), lay)
        a = evolve_schrodinger(psi, h, 5e-9, IntegratorConfig())
        assert np.max(np.abs(a.observables["norm"] - 1)) < 1e-10
        b = evolve_lindblad(psi, h, (), 5e-9, _cfg())
        fid = np.vdot(a.final.data, b.final.data @ a.final.data).real
        assert fid > 1 - 1e-8

    def test_propagator_unitary(self):
        p = SystemParams()
        h = hamiltonian(p, CJ, "measure", qubit_state_branch=1)
        u = propagator(h, 7e-9)
        np.testing.assert_allclose(u.conj().T @ u, np.eye(9), atol=1e-12)

    def test_mixed_input_rejected(self):
        with pytest.raises(ValueError):
            evolve_schrodinger(np.eye(3) / 3, np.zeros((3, 3)), 1e-9)


def test_sigma_z_observable():
    lay = HilbertLayout(2, True, True)
    p = SystemParams()
    h = hamiltonian(p, lay, "measure")
    psi = np.kron(np.kron(basis(2, 0), np.array([0.6, 0.8])), basis(3, M))
    tr = evolve_lindblad(QuantumState(psi, lay), h, (), 1e-9, _cfg())
    sz = embed(sigma_z(), "qubit", lay).matrix
    assert abs(tr.observables["sigma_z"][0] - np.vdot(psi, sz @ psi).real) < 1e-15
    assert abs(tr.observables["sigma_z"][0] - (0.36 - 0.64)) < 1e-15
