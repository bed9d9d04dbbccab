"""System parameters, Hamiltonians and Lindblad channels.

All frequencies are stored as angular frequencies (rad/s) and all incoherent
rates as plain rates (1/s). The helpers in :data:`UNITS` convert the mixed
conventions used when quoting circuit-QED parameters (``g/2pi``, ``chi/pi``,
plain MHz rates) into these internal units.

Rotating frame
--------------
``frame="rotating_at_drive"`` removes the drive carrier: the cavity and the
JPM rotate at the drive frequency ``omega_d``. In the dispersive model the
qubit rotates at its dressed transition ``omega_Q - chi_Q`` (so the qubit
term vanishes); in the Jaynes-Cummings model it also rotates at ``omega_d``,
which keeps the exchange term time independent. The drive is kept in
rotating-wave form ``(a/2)(e^{i phi} a + e^{-i phi} a^+)``, so every stage
Hamiltonian is piecewise constant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields, replace
from math import pi, sqrt
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch
from .hilbert import (
    E,
    G,
    M,
    HilbertLayout,
    Operator,
    destroy,
    embed,
    jpm_sigma_minus,
    jpm_sigma_plus,
    jpm_sigma_z,
    jpm_transition,
    number,
    sigma_minus,
    sigma_plus,
    sigma_z,
)

TWO_PI = 2 * pi

UNITS = {
    "MHz_over_2pi": TWO_PI * 1e6,
    "MHz_over_pi": pi * 1e6,
    "GHz_over_2pi": TWO_PI * 1e9,
    "MHz_rate": 1e6,
    "kHz_rate": 1e3,
    "rad_per_s": 1.0,
    "per_s": 1.0,
    "ns": 1e-9,
    "us": 1e-6,
    "s": 1.0,
    "rad": 1.0,
    "photons": 1.0,
    "dimensionless": 1.0,
}

STAGES = ("drive", "measure", "reset")
MODES = ("dispersive", "jaynes_cummings")

# paper working point
_DELTA = TWO_PI * 1e9
_CHI_Q = pi * 10e6  # chi_Q / pi = 10 MHz


@dataclass(frozen=True)
class SystemParams:
    """All physical parameters of the cavity, qubit and JPM.

    Fields left as ``None`` are resolved from the others:

    * ``omega_j_meas`` -> ``omega_c - chi_q`` (JPM resonant with the cavity
      dressed by qubit ``|1>``),
    * ``t_d`` -> ``pi / chi_q`` (pointer for ``|0>`` returns to vacuum),
    * ``t_r`` -> ``t_d``,
    * ``drive_amp`` -> amplitude giving ``|alpha_1|^2 = bright_photons`` at ``t_d``.
    """

    omega_c: float = TWO_PI * 6e9
    omega_q: float = TWO_PI * 6e9 - _DELTA
    omega_j_idle: float = TWO_PI * 7e9
    omega_j_meas: float | None = None
    g_q: float = sqrt(_CHI_Q * _DELTA)
    g_j: float = TWO_PI * 50e6
    gamma_j: float = 200e6
    gamma_d: float = 1e6
    gamma_r: float = 200e6
    kappa: float = 100e3
    cavity_decay: bool = False
    drive_amp: float | None = None
    bright_photons: float = 10.0
    drive_phase: float = 0.0
    reset_amp: float | None = None
    reset_phase: float = pi
    t_d: float | None = None
    t_m: float = 40e-9
    t_r: float | None = None
    measured_energy: float = 0.0

    def __post_init__(self):
        for name in ("g_q", "g_j", "gamma_j", "gamma_d", "gamma_r", "kappa"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.t_m < 0:
            raise ValueError("t_m must be nonnegative")
        if self.g_q > 0 and abs(self.delta) / self.g_q < 10:
            warnings.warn(
                f"|omega_c - omega_q| / g_q = {abs(self.delta) / self.g_q:.2f} < 10;"
                " the dispersive approximation is questionable",
                stacklevel=3,
            )

    # derived quantities: single definition sites
    @property
    def delta(self):
        return self.omega_c - self.omega_q

    @property
    def chi_q(self):
        return self.g_q**2 / (self.omega_c - self.omega_q)

    @property
    def chi_j(self):
        return self.g_j**2 / (self.omega_c - self.omega_j_idle)

    @property
    def omega_j_measure(self):
        return self.omega_c - self.chi_q if self.omega_j_meas is None else self.omega_j_meas

    @property
    def drive_time(self):
        return pi / self.chi_q if self.t_d is None else self.t_d

    @property
    def reset_time(self):
        return self.drive_time if self.t_r is None else self.t_r

    @property
    def drive_amplitude(self):
        if self.drive_amp is not None:
            return self.drive_amp
        return 2.0 * sqrt(self.bright_photons) / self.drive_time

    @property
    def drive_frequency(self):
        """``omega_d = omega_C - chi_Q + chi_J``: resonant with the ``|1>`` branch."""
        return self.omega_c - self.chi_q + self.chi_j

    def replace(self, **changes):
        return replace(self, **changes)

    def resolved(self):
        """Dictionary of every field with ``None`` entries resolved."""
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out.update(
            omega_j_meas=self.omega_j_measure,
            t_d=self.drive_time,
            t_r=self.reset_time,
            drive_amp=self.drive_amplitude,
        )
        return out

    def dispersive_ratio(self):
        return abs(self.delta) / self.g_q if self.g_q else float("inf")


@dataclass(frozen=True)
class PulseSchedule:
    """Piecewise drive ``A(t)``, JPM frequency ``omega_J(t)`` and stage boundaries.

    Stages occupy ``[0, t_d)``, ``[t_d, t_d + t_m)`` and
    ``[t_d + t_m, t_d + t_m + t_r)``. The JPM switches between idle and
    measurement frequency instantaneously at the stage boundaries.
    """

    t_d: float
    t_m: float
    t_r: float
    a0: float
    a1: float
    phi: float
    omega_d: float
    omega_j_idle: float
    omega_j_meas: float

    @classmethod
    def from_params(cls, params, optimal_drive=True, bright_on_one=True, omega_d=None, t_d=None):
        if optimal_drive:
            td = pi / params.chi_q if t_d is None else t_d
            if not np.isclose(td, pi / params.chi_q, rtol=1e-12):
                raise ValueError("optimal_drive requires t_d = pi / chi_q")
        else:
            td = params.drive_time if t_d is None else t_d
        if bright_on_one:
            wd = params.drive_frequency
        else:
            wd = params.drive_frequency if omega_d is None else omega_d
        a0 = params.drive_amp if params.drive_amp is not None else 2 * sqrt(params.bright_photons) / td
        a1 = params.reset_amp if params.reset_amp is not None else 0.0
        return cls(
            t_d=td,
            t_m=params.t_m,
            t_r=params.reset_time if params.t_r is not None else td,
            a0=a0,
            a1=a1,
            phi=params.reset_phase,
            omega_d=wd,
            omega_j_idle=params.omega_j_idle,
            omega_j_meas=params.omega_j_measure,
        )

    @property
    def boundaries(self):
        return (0.0, self.t_d, self.t_d + self.t_m, self.t_d + self.t_m + self.t_r)

    def stage_at(self, t):
        b = self.boundaries
        if t < b[0]:
            return "idle"
        if t < b[1]:
            return "drive"
        if t < b[2]:
            return "measure"
        if t < b[3]:
            return "reset"
        return "idle"

    def drive(self, t):
        """Complex RWA drive envelope ``(amplitude, phase)`` at time ``t``."""
        stage = self.stage_at(t)
        if stage == "drive":
            return self.a0, 0.0
        if stage == "reset":
            return self.a1, self.phi
        return 0.0, 0.0

    def A(self, t):
        """Lab-frame classical drive ``A(t)``."""
        amp, phase = self.drive(t)
        return amp * np.cos(self.omega_d * t + phase)

    def omega_j(self, t):
        return self.omega_j_meas if self.stage_at(t) == "measure" else self.omega_j_idle

    def reset_displacement(self):
        """``beta = (-i a_1 t_d / 2) e^{-i phi}`` produced by the reset pulse."""
        return -0.5j * self.a1 * self.t_d * np.exp(-1j * self.phi)


class Channel(NamedTuple):
    name: str
    operator: Operator
    rate: float


class DissipatorSet(tuple):
    """Tuple of :class:`Channel` entries ``(name, jump operator, rate)``."""

    def __new__(cls, channels=()):
        return super().__new__(cls, tuple(channels))

    def rates(self):
        return {c.name: c.rate for c in self}

    def active(self):
        return DissipatorSet(c for c in self if c.rate > 0)


def chi_q(params):
    return params.chi_q


# ---------------------------------------------------------------------------
# Hamiltonians


def _qubit_branch_sign(branch):
    if branch not in (0, 1):
        raise ValueError(f"qubit branch must be 0 or 1, got {branch!r}")
    return 1.0 if branch == 0 else -1.0


def _check_frame(frame):
    if frame not in ("lab", "rotating_at_drive"):
        raise ValueError(f"unknown frame {frame!r}")


def _stage_settings(schedule, stage):
    if stage == "drive":
        return schedule.a0, 0.0, schedule.omega_j_idle
    if stage == "measure":
        return 0.0, 0.0, schedule.omega_j_meas
    if stage == "reset":
        return schedule.a1, schedule.phi, schedule.omega_j_idle
    if stage == "idle":
        return 0.0, 0.0, schedule.omega_j_idle
    raise ValueError(f"unknown stage {stage!r}")


def dispersive_hamiltonian(params, layout, qubit_state_branch=None, frame="lab", schedule=None):
    """Dispersive cavity-qubit Hamiltonian ``(w_C + chi sz) a^+a - (w_Q - chi) sz / 2``.

    If the layout has no JPM factor the idle JPM enters as the static shift
    ``chi_J a^+ a``. With ``qubit_state_branch`` given and no qubit factor in
    the layout, ``sigma_z`` is replaced by its eigenvalue and the result is
    the effective cavity Hamiltonian ``w~_C a^+ a`` with
    ``w~_C = w_C +- chi_Q + chi_J``.
    """
    _check_frame(frame)
    n = layout.n_fock
    chi = params.chi_q
    num = embed(number(n), "cavity", layout).matrix
    h = np.zeros((layout.dim, layout.dim), dtype=complex)

    w_cav = params.omega_c
    if not layout.include_jpm:
        w_cav = w_cav + params.chi_j
    if frame == "rotating_at_drive":
        sched = schedule or PulseSchedule.from_params(params)
        w_cav = w_cav - sched.omega_d
    h += w_cav * num

    if layout.include_qubit:
        sz = embed(sigma_z(), "qubit", layout).matrix
        h += chi * (sz @ num)
        if frame == "lab":
            h += -0.5 * (params.omega_q - chi) * sz
    else:
        if qubit_state_branch is None:
            raise DimensionMismatch("layout has no qubit: pass qubit_state_branch")
        s = _qubit_branch_sign(qubit_state_branch)
        h += chi * s * num
        if frame == "lab":
            h += -0.5 * (params.omega_q - chi) * s * np.eye(layout.dim)
    return Operator(h, layout)


def stage_hamiltonian(params, layout, stage, mode="dispersive", frame="rotating_at_drive",
                      qubit_state_branch=None, schedule=None, time=0.0):
    """Hamiltonian for one protocol stage.

    In the rotating frame the result is time independent; ``time`` only
    matters in the lab frame (drive carrier).
    """
    _check_frame(frame)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sched = schedule or PulseSchedule.from_params(params)
    amp, phase, w_j = _stage_settings(sched, stage)
    n = layout.n_fock
    a = embed(destroy(n), "cavity", layout).matrix
    ad = a.conj().T
    num = ad @ a
    rot = frame == "rotating_at_drive"
    wd = sched.omega_d

    if mode == "dispersive":
        h = dispersive_hamiltonian(params, layout, qubit_state_branch, frame, sched).matrix.copy()
    else:
        if not layout.include_qubit:
            raise DimensionMismatch("the Jaynes-Cummings model needs the qubit in the layout")
        w_cav = params.omega_c + (0.0 if layout.include_jpm else params.chi_j)
        sz = embed(sigma_z(), "qubit", layout).matrix
        sp = embed(sigma_plus(), "qubit", layout).matrix
        sm = embed(sigma_minus(), "qubit", layout).matrix
        h = (w_cav - (wd if rot else 0.0)) * num
        h = h - 0.5 * (params.omega_q - (wd if rot else 0.0)) * sz
        h = h + params.g_q * (a @ sp + ad @ sm)

    if layout.include_jpm:
        szj = embed(jpm_sigma_z(params.measured_energy), "jpm", layout).matrix
        spj = embed(jpm_sigma_plus(), "jpm", layout).matrix
        smj = embed(jpm_sigma_minus(), "jpm", layout).matrix
        if rot:
            # the measured level carries no frame rotation: it is incoherent
            rot_j = np.diag([1.0, -1.0, 0.0]).astype(complex)
            szj_frame = embed(rot_j, "jpm", layout).matrix
            h = h - 0.5 * w_j * szj + 0.5 * wd * szj_frame
        else:
            h = h - 0.5 * w_j * szj
        h = h + params.g_j * (a @ spj + ad @ smj)

    if amp:
        if rot:
            h = h + 0.5 * amp * (np.exp(1j * phase) * a + np.exp(-1j * phase) * ad)
        else:
            h = h + amp * np.cos(wd * time + phase) * (a + ad)
    return Operator(h, layout)


def _require_full(layout):
    if not (layout.include_qubit and layout.include_jpm):
        raise DimensionMismatch("the full Hamiltonian needs cavity, qubit and JPM in the layout")


def full_hamiltonian(params, layout, time, frame="rotating_at_drive", schedule=None):
    """Dispersive system Hamiltonian with drive and JPM at time ``time``."""
    _require_full(layout)
    sched = schedule or PulseSchedule.from_params(params)
    return stage_hamiltonian(params, layout, sched.stage_at(time), "dispersive", frame,
                             schedule=sched, time=time)


def jaynes_cummings_hamiltonian(params, layout, time=None, frame="rotating_at_drive", schedule=None):
    """As :func:`full_hamiltonian` with the exact exchange ``g_Q (a s+ + a^+ s-)``.

    ``time=None`` gives the undriven Hamiltonian with the JPM idle.
    """
    if not layout.include_qubit:
        raise DimensionMismatch("the Jaynes-Cummings model needs the qubit in the layout")
    sched = schedule or PulseSchedule.from_params(params)
    stage = "idle" if time is None else sched.stage_at(time)
    return stage_hamiltonian(params, layout, stage, "jaynes_cummings", frame, schedule=sched,
                             time=0.0 if time is None else time)


def hamiltonian(params, layout, stage, mode="dispersive", qubit_state_branch=None, schedule=None):
    """Rotating-frame stage Hamiltonian; the form used by the protocol."""
    return stage_hamiltonian(params, layout, stage, mode, "rotating_at_drive",
                             qubit_state_branch=qubit_state_branch, schedule=schedule)


# ---------------------------------------------------------------------------
# dissipation


def build_dissipators(params, layout, stage="measure"):
    """Lindblad channels: JPM bright tunnelling, dark tunnelling, relaxation.

    The three JPM channels are present whenever the layout contains the JPM
    (zero rates are kept so the channel set has a fixed shape). Cavity decay
    ``a`` at rate ``kappa`` is added when ``params.cavity_decay`` is set.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    chans = []
    if layout.include_jpm:
        chans.append(Channel("bright", embed(jpm_transition(M, E), "jpm", layout), params.gamma_j))
        chans.append(Channel("dark", embed(jpm_transition(M, G), "jpm", layout), params.gamma_d))
        chans.append(Channel("relax", embed(jpm_transition(G, E), "jpm", layout), params.gamma_r))
    if params.cavity_decay:
        chans.append(Channel("cavity", embed(destroy(layout.n_fock), "cavity", layout), params.kappa))
    return DissipatorSet(chans)


def frequency_scale(hamiltonian, dissipators=()):
    """Largest detuning, coupling or rate in a generator (rad/s).

    Detunings are the diagonal entries of the rotating-frame Hamiltonian and
    couplings its off-diagonal entries, so photon-number enhancement is
    included.
    """
    h = hamiltonian.matrix if isinstance(hamiltonian, Operator) else np.asarray(hamiltonian)
    diag = np.abs(np.diag(h))
    off = np.abs(h - np.diag(np.diag(h)))
    scale = max(diag.max(initial=0.0), off.max(initial=0.0))
    for chan in dissipators:
        lmax = np.abs(chan.operator.matrix).max(initial=0.0)
        scale = max(scale, chan.rate * lmax**2)
    return float(scale)


def jc_dressing_unitary(params, n_fock):
    """Bare-to-dressed unitary of the cavity-qubit Jaynes-Cummings coupling.

    Column ``2k + q`` is the eigenstate adiabatically connected to the bare
    state ``|k, q>`` (cavity ``k``, qubit ``q``). Each excitation manifold
    ``{|k, 0>, |k-1, 1>}`` is rotated by ``theta_k`` with
    ``tan(2 theta_k) = 2 g sqrt(k) / Delta``. The top state ``|n_fock-1, 1>``
    has no partner inside the truncation and is left bare.
    """
    d = 2 * n_fock
    u = np.eye(d)
    for k in range(1, n_fock):
        th = 0.5 * np.arctan2(2 * params.g_q * sqrt(k), params.delta)
        c, s = np.cos(th), np.sin(th)
        i0, i1 = 2 * k, 2 * (k - 1) + 1  # |k, 0>, |k-1, 1>
        u[i0, i0], u[i1, i0] = c, s
        u[i0, i1], u[i1, i1] = -s, c
    return u
