"""Built-in oracle suite behind ``sim verify``.

Every oracle compares a simulated quantity with an independent closed form
(or, for convergence, with the same run at a smaller step) and returns an
:class:`OracleResult` carrying the measured deviation and its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .analysis import (
    PROBE_STATES,
    analytic_detection_probability,
    analytic_ideal_fidelity,
    choi_from_probes,
    lifetime_scaling,
    perfect_qnd_choi,
    process_fidelity,
    qubit_lifetimes,
)
from .evolve import STEP_SAFETY
from .errors import JPMReadoutError
from .model import PulseSchedule
from .protocol import (
    ReadoutChannel,
    branching_trace,
    detection_trace,
    pointer_amplitudes,
    protocol_frequency_scale,
    run_drive_stage,
)

DRIVE_TOL = 1e-5
VACUUM_TOL = 1e-8
BRANCHING_TOL = 1e-4
DETECTION_TOL = 0.03
CHOI_TOL = 1e-3
LIFETIME_TOL = 1e-12
HALVING_TOL = 1e-7
ROUNDOFF_FLOOR = 1e-12
RATIO_RANGE = (12.0, 20.0)
DETECTION_POINTS = (0.0, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0)


@dataclass
class OracleResult:
    name: str
    passed: bool
    deviation: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.name}: deviation {self.deviation:.3e} (tolerance {self.tolerance:.1e}){extra}"


def drive_oracle(params, config):
    """Simulated drive-stage occupations against the closed-form pointers."""
    sched = PulseSchedule.from_params(params)
    times = np.linspace(0.0, sched.t_d, 201)
    res = run_drive_stage(params, (1 / sqrt(2), 1 / sqrt(2)), "dispersive", schedule=sched, times=times,
                          config=config)
    a0, a1 = pointer_amplitudes(params, res.times, sched)
    ana = np.stack([np.abs(a0) ** 2, np.abs(a1) ** 2], axis=1)
    # relative to each branch's peak occupation: pointwise ratios are 0/0 at t = 0
    peak = np.max(ana, axis=0)
    rel = float(np.max(np.abs(res.occupation - ana) / peak))
    end = float(res.occupation[-1, 0])
    passed = rel < DRIVE_TOL and end < VACUUM_TOL
    return OracleResult("drive pointers", passed, rel, DRIVE_TOL, f"|alpha_0(t_d)|^2 = {end:.2e}")


def branching_oracle(params, config):
    """Isolated JPM from ``|e>`` without dark counts saturates at ``gamma_J / (gamma_J + gamma_R)``."""
    p = params.replace(gamma_d=0.0)
    total = p.gamma_j + p.gamma_r
    expected = p.gamma_j / total if total > 0 else 0.0
    if p.gamma_j == 0:
        _, pm = branching_trace(p, 1e-9, config=config)
        dev = abs(float(pm[-1]))
        return OracleResult("branching ratio", dev < BRANCHING_TOL, dev, BRANCHING_TOL, "P_B = 0 (gamma_J = 0)")
    _, pm = branching_trace(p, 10.0 / total, config=config)
    dev = abs(float(pm[-1]) - expected)
    return OracleResult("branching ratio", dev < BRANCHING_TOL, dev, BRANCHING_TOL, f"P_B = {expected:.6f}")


def detection_oracle(params, config, t_m=50e-9, points=DETECTION_POINTS):
    """Simulated click probability against the analytic detection model."""
    worst = 0.0
    for x in points:
        _, pm, _ = detection_trace(params, x, t_m, branch=1 if x > 0 else 0, times=[0.0, t_m], config=config)
        ana = analytic_detection_probability(x, params.gamma_j, params.gamma_r, params.gamma_d, t_m)
        worst = max(worst, abs(float(pm[-1]) - float(ana)))
    return OracleResult("detection model", worst < DETECTION_TOL, worst, DETECTION_TOL,
                        f"|alpha|^2 in {list(points)}, t_m = {t_m * 1e9:g} ns")


def choi_oracle(params, config, t_m=20e-9):
    """Choi pipeline without relaxation or dark counts against the closed-form fidelity."""
    p = params.replace(gamma_d=0.0, gamma_r=0.0)
    ch = ReadoutChannel(p, "dispersive", t_m, times=[0.0, t_m], config=config)
    outs = [ch(np.outer(v, v.conj())) for v in PROBE_STATES.values()]
    f_sim = process_fidelity(choi_from_probes(*outs), perfect_qnd_choi())
    sched = PulseSchedule.from_params(p)
    a0, a1 = pointer_amplitudes(p, sched.t_d, sched)
    f_ana = analytic_ideal_fidelity(complex(a0), complex(a1))
    dev = abs(f_sim - f_ana)
    return OracleResult("ideal fidelity", dev < CHOI_TOL, dev, CHOI_TOL, f"F_sim = {f_sim:.8f}, F = {f_ana:.8f}")


def lifetime_oracle(params, config=None, n_values=(1, 2, 5, 10, 20)):
    """JPM-limited lifetimes obey ``T1(n) = T1(0) (sqrt(n) + sqrt(n+1))^2``."""
    t0 = qubit_lifetimes(params, 0).T1_gammaR
    worst = 0.0
    for n in n_values:
        tn = qubit_lifetimes(params, n).T1_gammaR
        worst = max(worst, abs(tn / t0 - lifetime_scaling(n)) / lifetime_scaling(n))
    rep = qubit_lifetimes(params, 0)
    return OracleResult("lifetime scaling", worst < LIFETIME_TOL, worst, LIFETIME_TOL,
                        f"T1_kappa = {rep.T1_kappa:.4g} s, T1_gammaR(0) = {rep.T1_gammaR:.4g} s")


def convergence_oracle(params, config, alpha_sq=None, duration=2e-9):
    """Step-halving check of the fixed-step integrator at the configured ``dt``.

    The stability bound is judged against :func:`protocol_frequency_scale`,
    the fastest generator of the drive and measurement stages.

    Runs the bright detection problem (``alpha_sq`` defaults to
    ``params.bright_photons``) at ``dt``, ``dt/2`` and ``dt/4``. Passes
    when ``dt`` respects the stability bound, halving changes the final
    state by less than ``HALVING_TOL``, and the successive-difference ratio
    is near the RK4 value 16 (unless both differences sit at roundoff, where
    the ratio carries no information).
    """
    if alpha_sq is None:
        alpha_sq = params.bright_photons
    # raw errors are the point here, so no bound or physicality guard
    base = config.replace(check_step_bound=False, check_physical=False, retry=False, store_states=False)
    finals = []
    for k in range(3):
        cfg = base.replace(dt=config.dt / 2**k)
        _, _, tr = detection_trace(params, alpha_sq, duration, times=[0.0, duration], config=cfg)
        finals.append(tr.final.data)
    d1 = float(np.max(np.abs(finals[0] - finals[1])))
    d2 = float(np.max(np.abs(finals[1] - finals[2])))
    ratio = d1 / d2 if d2 > 0 else float("inf")

    scale = protocol_frequency_scale(params)
    bound_ok = config.dt * scale <= STEP_SAFETY
    at_floor = d1 < ROUNDOFF_FLOOR
    order_ok = at_floor or RATIO_RANGE[0] <= ratio <= RATIO_RANGE[1]
    passed = bound_ok and d1 < HALVING_TOL and order_ok
    detail = f"error ratio {ratio:.2f}, dt*scale = {config.dt * scale:.4f} (limit {STEP_SAFETY})"
    if not bound_ok:
        detail += ", step bound violated"
    if at_floor:
        detail += ", differences at roundoff"
    return OracleResult("RK4 convergence", passed, d1, HALVING_TOL, detail)


ORACLES = (
    drive_oracle,
    branching_oracle,
    detection_oracle,
    choi_oracle,
    lifetime_oracle,
    convergence_oracle,
)


NAMES = {
    drive_oracle: "drive pointers",
    branching_oracle: "branching ratio",
    detection_oracle: "detection model",
    choi_oracle: "ideal fidelity",
    lifetime_oracle: "lifetime scaling",
    convergence_oracle: "RK4 convergence",
}


def _name(oracle):
    return NAMES.get(oracle, oracle.__name__)


def verify(cfg, oracles=ORACLES):
    """Run every oracle with the config's parameters and integrator settings.

    A simulation error inside one oracle (for example a step size beyond
    the stability bound) is reported as that oracle's failure and the rest
    still run.
    """
    results = []
    for oracle in oracles:
        try:
            results.append(oracle(cfg.params, cfg.integrator))
        except JPMReadoutError as exc:
            results.append(OracleResult(_name(oracle), False, float("nan"), float("nan"),
                                        f"{type(exc).__name__}: {exc}"))
    return results
