"""Experiment runners behind ``sim run``.

Each experiment maps one sweep point (a dict of axis values) to a list of
rows. Columns are fixed per experiment and listed in :data:`COLUMNS`; the
swept axes are prepended in declaration order. Time-trace experiments treat
a ``t_m`` sweep axis as the list of recorded times rather than as an outer
loop.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from math import sqrt

import numpy as np

from .analysis import (
    analytic_detection_probability,
    analytic_ideal_fidelity,
    choi_traces,
    lifetime_scaling,
    perfect_qnd_choi,
    process_fidelity,
    qubit_lifetimes,
    reset_error,
    subtraction_probability,
)
from .config import PARAM_KINDS
from .errors import ConfigError
from .model import PulseSchedule
from .protocol import (
    ReadoutChannel,
    detection_trace,
    pointer_amplitudes,
    run_drive_stage,
    run_repeated_protocol,
)

COLUMNS = {
    "drive_trace": ("t_ns", "n0_sim", "n1_sim", "n0_analytic", "n1_analytic"),
    "detection_surface": ("t_m_ns", "P_sim", "P_analytic"),
    "contrast_vs_time": ("t_m_ns", "P_bright", "P_dark", "contrast"),
    "contrast_vs_rate": ("gamma_d_per_s", "t_m_opt_ns", "P_bright", "P_dark", "contrast_max"),
    "reset_error_curve": ("P_N", "reset_error"),
    "fidelity_vs_time": ("t_m_ns", "fidelity", "fidelity_ideal_analytic"),
    "lifetimes": ("T1_kappa_s", "T1_gammaR_s", "Gamma_kappa_per_s", "Gamma_gammaR_per_s", "scaling"),
    "qnd_repeat": ("P00", "P01", "P10", "P11", "P0", "P1"),
}

COLUMN_DOCS = {
    "t_ns": "drive time (ns)",
    "t_m_ns": "measurement time (ns)",
    "n0_sim": "cavity photons, qubit |0> branch, simulated",
    "n1_sim": "cavity photons, qubit |1> branch, simulated",
    "n0_analytic": "|alpha_0(t)|^2 closed form",
    "n1_analytic": "|alpha_1(t)|^2 closed form",
    "P_sim": "simulated click probability",
    "P_analytic": "saturated bright model combined with dark counts",
    "P_bright": "click probability for the bright pointer",
    "P_dark": "click probability for the vacuum pointer",
    "contrast": "P_bright - P_dark",
    "gamma_d_per_s": "dark rate used at this point (1/s)",
    "t_m_opt_ns": "measurement time of maximal contrast (ns)",
    "contrast_max": "maximal contrast over the recorded times",
    "P_N": "probability that N photons were subtracted",
    "reset_error": "1 - |<0|D(alpha_M) psi_N>|^2 after the reset displacement",
    "fidelity": "process fidelity of the readout channel with the perfect QND channel",
    "fidelity_ideal_analytic": "closed-form fidelity without relaxation or dark counts",
    "T1_kappa_s": "cavity-limited qubit lifetime (s)",
    "T1_gammaR_s": "JPM-limited qubit lifetime during measurement (s)",
    "Gamma_kappa_per_s": "cavity-limited decay rate (1/s)",
    "Gamma_gammaR_per_s": "JPM-limited decay rate (1/s)",
    "scaling": "(sqrt(n) + sqrt(n+1))^2",
    "P00": "joint probability: second 0, first 0",
    "P01": "joint probability: second 0, first 1",
    "P10": "joint probability: second 1, first 0",
    "P11": "joint probability: second 1, first 1",
    "P0": "single-readout probability of 0",
    "P1": "single-readout probability of 1",
}

# axes an experiment consumes internally, and defaults for required extra axes
TIME_AXIS_EXPERIMENTS = ("detection_surface", "contrast_vs_time", "fidelity_vs_time")
DEFAULT_AXES = {
    "detection_surface": {"alpha_sq": tuple(float(k) for k in range(11))},
    "reset_error_curve": {
        "N": tuple(float(k) for k in range(1, 7)),
        "alpha_sq": tuple(0.5 * k for k in range(41)),
    },
    "lifetimes": {"n": (0.0, 10.0)},
}
ALLOWED_EXTRA = {
    "detection_surface": {"alpha_sq"},
    "reset_error_curve": {"N", "alpha_sq"},
    "lifetimes": {"n"},
}

QUBIT_VECTORS = {
    "0": (1.0, 0.0),
    "1": (0.0, 1.0),
    "plus": (1 / sqrt(2), 1 / sqrt(2)),
    "minus": (1 / sqrt(2), -1 / sqrt(2)),
    "plus_i": (1 / sqrt(2), 1j / sqrt(2)),
}


def _record_times(cfg, t_end):
    step = cfg.option("record_interval")
    n = max(int(round(t_end / step)), 1)
    return np.linspace(0.0, t_end, n + 1)


def _measure_times(cfg, params):
    """Recorded measurement times: the ``t_m`` axis if swept, else a grid."""
    if "t_m" in cfg.sweep:
        times = np.array(sorted(set(cfg.sweep["t_m"])))
        if times[0] < 0:
            raise ConfigError("measurement times must be nonnegative", "sweep.t_m")
        if times[0] > 0:
            times = np.concatenate([[0.0], times])
        return times, set(cfg.sweep["t_m"])
    t_end = cfg.option("t_max") or params.t_m
    times = _record_times(cfg, t_end)
    return times, None


def _keep(times, wanted):
    if wanted is None:
        return np.ones(len(times), dtype=bool)
    return np.array([t in wanted for t in times])


def _drive_trace(cfg, params, point):
    sched = PulseSchedule.from_params(params)
    times = _record_times(cfg, sched.t_d)
    res = run_drive_stage(params, (1 / sqrt(2), 1 / sqrt(2)), cfg.mode, schedule=sched, times=times,
                          config=cfg.integrator)
    a0, a1 = pointer_amplitudes(params, res.times, sched)
    return [
        (t * 1e9, occ[0], occ[1], abs(x0) ** 2, abs(x1) ** 2)
        for t, occ, x0, x1 in zip(res.times, res.occupation, a0, a1)
    ]


def _detection_surface(cfg, params, point):
    times, wanted = _measure_times(cfg, params)
    alpha_sq = point["alpha_sq"]
    branch = 1 if alpha_sq > 0 else 0
    t, p, _ = detection_trace(params, alpha_sq, times[-1], branch=branch, times=times, config=cfg.integrator)
    ana = analytic_detection_probability(alpha_sq, params.gamma_j, params.gamma_r, params.gamma_d, t)
    keep = _keep(times, wanted)
    return [(ti * 1e9, pi, ai) for ti, pi, ai, k in zip(t, p, ana, keep) if k]


def _bright_dark(cfg, params, times):
    _, pb, _ = detection_trace(params, params.bright_photons, times[-1], branch=1, times=times,
                               config=cfg.integrator)
    _, pd, _ = detection_trace(params, 0.0, times[-1], branch=0, times=times, config=cfg.integrator)
    return pb, pd


def _contrast_vs_time(cfg, params, point):
    times, wanted = _measure_times(cfg, params)
    pb, pd = _bright_dark(cfg, params, times)
    keep = _keep(times, wanted)
    return [(t * 1e9, b, d, b - d) for t, b, d, k in zip(times, pb, pd, keep) if k]


def _contrast_vs_rate(cfg, params, point):
    ratio = cfg.option("dark_ratio")
    if ratio is not None:
        params = params.replace(gamma_d=params.gamma_j / ratio)
    times = _record_times(cfg, cfg.option("t_max") or params.t_m)
    pb, pd = _bright_dark(cfg, params, times)
    c = pb - pd
    k = int(np.argmax(c))
    return [(params.gamma_d, times[k] * 1e9, pb[k], pd[k], c[k])]


def _reset_error_curve(cfg, params, point):
    n = int(point["N"])
    x = point["alpha_sq"]
    return [(subtraction_probability(n, x), reset_error(sqrt(x), n))]


def _fidelity_vs_time(cfg, params, point):
    times, wanted = _measure_times(cfg, params)
    ch = ReadoutChannel(params, cfg.mode, times[-1], times=times, config=cfg.integrator)
    chois = choi_traces(ch.trace)
    ref = perfect_qnd_choi()
    sched = PulseSchedule.from_params(params)
    a0, a1 = pointer_amplitudes(params, sched.t_d, sched)
    f_ideal = analytic_ideal_fidelity(complex(a0), complex(a1))
    keep = _keep(ch.times, wanted)
    return [(t * 1e9, process_fidelity(c, ref), f_ideal) for t, c, k in zip(ch.times, chois, keep) if k]


def _lifetimes(cfg, params, point):
    n = point["n"]
    if n != int(n):
        raise ConfigError("cavity occupation must be an integer", "sweep.n")
    rep = qubit_lifetimes(params, int(n))
    return [(rep.T1_kappa, rep.T1_gammaR, rep.Gamma_kappa, rep.Gamma_gammaR, lifetime_scaling(int(n)))]


def _qnd_repeat(cfg, params, point):
    psi = QUBIT_VECTORS[cfg.option("qubit_state")]
    mode = cfg.option("reset_mode")
    probs = run_repeated_protocol(params, psi, cfg.mode, reset_between=mode != "none",
                                  reset_mode="ideal" if mode == "none" else mode, config=cfg.integrator)
    return [tuple(probs[k] for k in COLUMNS["qnd_repeat"])]


RUNNERS = {
    "drive_trace": _drive_trace,
    "detection_surface": _detection_surface,
    "contrast_vs_time": _contrast_vs_time,
    "contrast_vs_rate": _contrast_vs_rate,
    "reset_error_curve": _reset_error_curve,
    "fidelity_vs_time": _fidelity_vs_time,
    "lifetimes": _lifetimes,
    "qnd_repeat": _qnd_repeat,
}


def sweep_axes(cfg):
    """Outer-loop axes ``[(name, values)]`` for ``cfg`` (user axes first)."""
    allowed = ALLOWED_EXTRA.get(cfg.experiment, set())
    axes = []
    for name, values in cfg.axes():
        if name == "t_m" and cfg.experiment in TIME_AXIS_EXPERIMENTS:
            continue
        if name not in PARAM_KINDS and name not in allowed:
            raise ConfigError(f"axis {name!r} does not apply to {cfg.experiment}", f"sweep.{name}")
        axes.append((name, values))
    names = {a for a, _ in axes}
    for name, values in DEFAULT_AXES.get(cfg.experiment, {}).items():
        if name not in names:
            axes.append((name, values))
    return axes


def columns(cfg):
    time_axis = ("t_m",) if cfg.experiment in TIME_AXIS_EXPERIMENTS else ()
    lead = tuple(name for name, _ in sweep_axes(cfg) if name not in time_axis)
    return lead + COLUMNS[cfg.experiment]


def sweep_points(cfg):
    axes = sweep_axes(cfg)
    names = [a for a, _ in axes]
    return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in axes))]


def run_point(cfg, point):
    """Rows for one sweep point, with the axis values prepended."""
    overrides = {k: v for k, v in point.items() if k in PARAM_KINDS}
    params = cfg.params.replace(**overrides) if overrides else cfg.params
    rows = RUNNERS[cfg.experiment](cfg, params, point)
    lead = tuple(float(v) for v in point.values())
    return [lead + tuple(float(np.real(x)) for x in row) for row in rows]


def worker_count():
    """Worker processes from ``SIM_WORKERS`` (default 1)."""
    raw = os.environ.get("SIM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"must be a positive integer, got {raw!r}", "SIM_WORKERS") from None
    if n < 1:
        raise ConfigError(f"must be a positive integer, got {raw!r}", "SIM_WORKERS")
    return n


def _run_indexed(args):
    cfg, point = args
    return run_point(cfg, point)


def run_experiment(cfg, workers=None):
    """All rows of an experiment, ordered by sweep index.

    Returns
    -------
    columns : tuple of str
    rows : list of tuple of float
    """
    points = sweep_points(cfg)
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(points))) as pool:
            # map preserves submission order whatever the completion order
            chunks = list(pool.map(_run_indexed, [(cfg, p) for p in points]))
    else:
        chunks = [run_point(cfg, p) for p in points]
    rows = [row for chunk in chunks for row in chunk]
    return columns(cfg), rows
