from math import exp, pi, sqrt

import numpy as np
import pytest

from conftest import PLUS
from jpmreadout.analysis import (
    conditional_states,
    dephasing_factor,
    reset_error,
    subtraction_backaction,
)
from jpmreadout.errors import DimensionMismatch
from jpmreadout.evolve import STEP_SAFETY, IntegratorConfig
from jpmreadout.hilbert import HilbertLayout, QuantumState, coherent_state, fock_cutoff, state_fidelity
from jpmreadout.model import PulseSchedule, SystemParams
from jpmreadout.protocol import (
    ReadoutChannel,
    branching_trace,
    detection_trace,
    pointer_amplitudes,
    protocol_frequency_scale,
    run_drive_stage,
    run_measurement_stage,
    run_repeated_protocol,
    run_reset_stage,
)


def _qubit(state):
    n = state.layout.n_fock
    return np.einsum("aqap->qp", state.density_matrix().reshape(n, 2, n, 2))


def _is_density(r, tol=1e-8):
    return (abs(np.trace(r) - 1) < tol and np.max(np.abs(r - r.conj().T)) < 1e-10
            and np.linalg.eigvalsh(0.5 * (r + r.conj().T))[0] > -tol)


class TestDrive:
    def test_ground_returns_to_vacuum(self):
        res = run_drive_stage(SystemParams(), (1.0, 0.0))
        assert res.occupation[-1, 0] < 1e-8
        assert abs(res.alpha0) < 1e-12

    def test_excited_reaches_bright_photons(self):
        res = run_drive_stage(SystemParams(), (0.0, 1.0))
        assert abs(res.occupation[-1, 1] - 10.0) < 1e-4
        assert res.branch_fidelities[1] > 1 - 1e-6  # branch |0> is empty here (NaN)

    def test_half_period_maximum(self):
        p = SystemParams()
        t_half = pi / (2 * p.chi_q)
        s = PulseSchedule.from_params(p, optimal_drive=False, t_d=t_half)
        res = run_drive_stage(p, (1.0, 0.0), schedule=s)
        assert res.occupation[-1, 0] == pytest.approx((s.a0 / (2 * p.chi_q)) ** 2, rel=1e-6)

    def test_amplitudes_pointwise(self):
        p = SystemParams()
        s = PulseSchedule.from_params(p)
        t = np.linspace(0, s.t_d, 21)
        res = run_drive_stage(p, PLUS, schedule=s, times=t)
        a0, a1 = pointer_amplitudes(p, res.times, s)
        scale = np.abs(res.amplitudes).max(axis=0)
        assert np.max(np.abs(res.amplitudes[:, 0] - a0)) / scale[0] < 1e-6
        assert np.max(np.abs(res.amplitudes[:, 1] - a1)) / scale[1] < 1e-6

    def test_dephasing_matches_simulation(self):
        # coherence a b* <alpha_1|alpha_0>: its squared modulus is suppressed by D
        p = SystemParams(bright_photons=1.5)
        a, b = 0.6, 0.8
        res = run_drive_stage(p, (a, b))
        rq = _qubit(res.state)
        d = dephasing_factor(res.alpha0, res.alpha1)
        assert abs(abs(rq[0, 1] / (a * b)) ** 2 - d) < 1e-8
        np.testing.assert_allclose(np.diag(rq).real, [a * a, b * b], atol=1e-10)

    def test_jaynes_cummings_mode(self):
        p = SystemParams(bright_photons=2.0)
        res = run_drive_stage(p, (0.0, 1.0), "jaynes_cummings")
        assert res.mode == "jaynes_cummings"
        assert 0.9 < res.branch_fidelities[1] <= 1.0
        assert abs(abs(res.alpha1) ** 2 - 2.0) < 0.3

    def test_mixed_qubit_input(self):
        p = SystemParams(bright_photons=1.0)
        pure = run_drive_stage(p, PLUS)
        mixed = run_drive_stage(p, np.full((2, 2), 0.5))
        np.testing.assert_allclose(mixed.state.density_matrix(), pure.state.density_matrix(), atol=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            run_drive_stage(SystemParams(), (1.0, 1.0))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            run_drive_stage(SystemParams(), (1.0, 0.0), "exact")


class TestMeasurement:
    def test_dark_only(self, default_runs):
        assert abs(default_runs["0"].click_probability - (1 - exp(-1e6 * 40e-9))) < 2e-3

    def test_bright_and_contrast(self, default_runs):
        pb = default_runs["1"].click_probability
        pd = default_runs["0"].click_probability
        assert pb > 0.95
        assert pb - pd > 0.9

    def test_click_monotone(self, default_runs):
        for rec in default_runs.values():
            assert np.all(np.diff(rec.click_trace) >= -1e-12)

    def test_contrast_positive(self, default_runs):
        b, d = default_runs["1"].click_trace, default_runs["0"].click_trace
        assert np.all(b[1:] > d[1:])

    def test_linearity(self, default_runs):
        avg = 0.5 * (default_runs["0"].click_probability + default_runs["1"].click_probability)
        assert abs(default_runs["+"].click_probability - avg) < 1e-6

    def test_populations_preserved(self, default_runs):
        for rec in default_runs.values():
            q = rec.qubit_trace
            assert np.max(np.abs(np.diagonal(q, axis1=1, axis2=2) - np.diagonal(q[0])[None])) < 1e-8

    def test_conditional_states_valid(self, default_runs):
        rec = default_runs["+"]
        assert _is_density(rec.rho_click) and _is_density(rec.rho_noclick)
        assert rec.click_probability == pytest.approx(
            np.trace(rec.qubit_click_trace[-1]).real, abs=1e-12)

    def test_ideal_saturation(self, ideal_plus_run):
        # branch |1> clicks with probability 1 - e^-10; branch |0> never
        assert abs(2 * ideal_plus_run.click_probability - (1 - exp(-10))) < 1e-3

    def test_ideal_conditional_states(self, ideal_params, ideal_plus_run):
        s = PulseSchedule.from_params(ideal_params)
        a0, a1 = pointer_amplitudes(ideal_params, s.t_d, s)
        cs = conditional_states(PLUS[0], PLUS[1], a0, a1)
        # the detuned |0> branch returns to vacuum carrying exp(i eps^2 t_d / 2 chi),
        # a deterministic Z rotation (ac Stark) that the closed form leaves out
        eps = s.a0 / 2
        phi = eps ** 2 * s.t_d / (2 * ideal_params.chi_q)
        psi0 = np.array([np.exp(1j * phi), 1.0]) * cs.psi0
        assert state_fidelity(psi0, ideal_plus_run.rho_noclick) > 1 - 1e-4
        assert state_fidelity(cs.psi1, ideal_plus_run.rho_click) > 1 - 1e-4

    def test_rejects_jpm_layout(self):
        lay = HilbertLayout(3, True, True)
        with pytest.raises(DimensionMismatch):
            run_measurement_stage(QuantumState(np.eye(18) / 18, lay), SystemParams())


class TestDetection:
    def test_vacuum_dark_counts(self):
        t, pm, _ = detection_trace(SystemParams(), 0.0, 40e-9, times=[10e-9, 40e-9])
        np.testing.assert_allclose(pm, 1 - np.exp(-1e6 * t), atol=1e-9)

    def test_branching(self):
        p = SystemParams(gamma_d=0.0)
        _, pm = branching_trace(p, 5 / p.gamma_j)
        assert abs(pm[-1] - 0.5) < 1e-4

    def test_frequency_scale(self):
        # default dt respects the step bound; ten times larger does not
        p = SystemParams()
        scale = protocol_frequency_scale(p)
        assert scale >= max(p.gamma_j, 2 * p.chi_q)
        assert IntegratorConfig().dt * scale <= STEP_SAFETY < 10 * IntegratorConfig().dt * scale


class TestReset:
    def test_ground_branch_untouched(self, default_runs):
        rec = default_runs["0"]
        assert rec.residual_photons[0] < 1e-8
        assert rec.reset_error[0] < 1e-8

    def test_pristine_coherent(self):
        p = SystemParams()
        n = fock_cutoff(sqrt(10)) + 10
        alpha = -1j * sqrt(10)
        cav = QuantumState(coherent_state(alpha, n).data, HilbertLayout(n, False, False))
        rec = run_reset_stage(cav, p, alpha_m=alpha)
        assert rec.reset_error[1] < 1e-8

    def test_cross_module_oracle(self):
        # one subtraction on |alpha_1>, |alpha_1|^2 = 10, against the closed form
        p = SystemParams()
        n = fock_cutoff(sqrt(10)) + 10
        alpha = -1j * sqrt(10)
        sub = subtraction_backaction(coherent_state(alpha, n).data, 1)
        rec = run_reset_stage(QuantumState(sub, HilbertLayout(n, False, False)), p)
        assert abs(rec.reset_error[1] - reset_error(alpha, 1)) < 1e-6
        assert abs(rec.alpha_m) ** 2 == pytest.approx(np.sum(np.arange(n) * np.abs(sub) ** 2), rel=1e-12)

    def test_drive_stark_phase(self):
        p = SystemParams(gamma_d=0.0, gamma_r=0.0, bright_photons=2.0)
        s = PulseSchedule.from_params(p)
        rq = _qubit(run_drive_stage(p, PLUS, schedule=s).state)
        assert abs(np.angle(rq[0, 1]) - 2.0 / (2 * pi)) < 1e-6

    def test_full_protocol_reset(self, default_runs):
        # the click branch is phase-spread (random absorption time while the JPM
        # hybridizes with the cavity), so the displacement only partly empties it
        rec = default_runs["1"]
        assert abs(rec.alpha_m) ** 2 > 5.0
        assert rec.residual_photons[1] < 0.3 * rec.drive.occupation[-1, 1]
        assert rec.reset_error[1] < 0.6
        assert rec.reset_error[1] > reset_error(sqrt(10), 1)


class TestRepeated:
    def test_dark_counts_break_p00(self):
        p = SystemParams(bright_photons=2.0, gamma_d=2e7)
        r = run_repeated_protocol(p, (1.0, 0.0))
        assert r["P00"] < r["P0"]
        assert sum(r[k] for k in ("P00", "P01", "P10", "P11")) == pytest.approx(1.0, abs=1e-8)
        assert r["P0"] == pytest.approx(r["P00"] + r["P10"], abs=1e-12)
        assert r["P1"] == pytest.approx(r["P01"] + r["P11"], abs=1e-12)

    def test_no_reset_between(self):
        p = SystemParams(bright_photons=2.0)
        r = run_repeated_protocol(p, (0.0, 1.0), reset_between=False)
        assert sum(r[k] for k in ("P00", "P01", "P10", "P11")) == pytest.approx(1.0, abs=1e-8)

    def test_unknown_reset_mode(self):
        with pytest.raises(ValueError):
            run_repeated_protocol(SystemParams(bright_photons=1.0), PLUS, reset_mode="magic")


def test_channel_is_linear():
    p = SystemParams(bright_photons=2.0)
    ch = ReadoutChannel(p, t_m=10e-9, times=[5e-9, 10e-9])
    r1 = np.array([[0.7, 0.3 - 0.2j], [0.3 + 0.2j, 0.3]])
    r2 = np.array([[0.2, 0.1j], [-0.1j, 0.8]])
    lhs = ch(0.5 * (r1 + r2))
    rhs = 0.5 * (ch(r1) + ch(r2))
    assert np.max(np.abs(lhs - rhs)) < 1e-12
    assert len(ch.trace(r1)) == 2
