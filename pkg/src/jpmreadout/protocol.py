"""Three-stage readout: drive, JPM measurement, reset.

Dispersive mode exploits the block structure of the problem: the qubit
operator commutes with every generator, so the joint state splits into
cavity-JPM blocks ``X_qq'`` (the coefficient of ``|q><q'|``) that evolve
independently. Diagonal blocks follow an ordinary master equation with the
branch Hamiltonian ``H_q``; the coherence block follows
``dX/dt = -i(H_0 X - X H_1) + dissipator(X)``. Jaynes-Cummings mode has no
such structure and evolves the full cavity-qubit-JPM density matrix.

Outcome labels: ``1`` is a JPM click (population of the measured level),
``0`` is no click.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import sqrt

import numpy as np

from .errors import DimensionMismatch
from .evolve import IntegratorConfig, evolve_lindblad, evolve_schrodinger, propagator
from .hilbert import (
    E,
    G,
    M,
    HilbertLayout,
    QuantumState,
    basis,
    coherent_state,
    destroy,
    displacement_matrix,
    fock_cutoff,
    state_fidelity,
)
from .model import (
    MODES,
    PulseSchedule,
    SystemParams,
    build_dissipators,
    frequency_scale,
    hamiltonian,
    jc_dressing_unitary,
)

__all__ = [
    "PulseSchedule",
    "DriveResult",
    "RunRecord",
    "pointer_amplitudes",
    "run_drive_stage",
    "run_measurement_stage",
    "run_reset_stage",
    "run_full_protocol",
    "run_repeated_protocol",
    "detection_trace",
    "ReadoutChannel",
    "branching_trace",
    "protocol_frequency_scale",
]


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def pointer_amplitudes(params, t, schedule=None):
    """Closed-form pointer amplitudes ``(alpha_0(t), alpha_1(t))`` in the drive frame.

    Branch ``|1>`` is resonant and grows linearly; branch ``|0>`` is detuned
    by ``2 chi_Q`` and circles back to the origin at ``t = pi / chi_Q``.
    """
    sched = schedule or PulseSchedule.from_params(params)
    t = np.asarray(t, dtype=float)
    a0 = sched.a0
    chi = params.chi_q
    alpha1 = -0.5j * a0 * t
    alpha0 = (a0 / (4 * chi)) * (np.exp(-2j * chi * t) - 1.0)
    return alpha0, alpha1


def _qubit_density(qubit_state):
    q = np.asarray(qubit_state, dtype=complex)
    if q.shape == (2,):
        norm = np.vdot(q, q).real
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"qubit amplitudes not normalized (|a|^2+|b|^2 = {norm:.12g})")
        return np.outer(q, q.conj()), q
    if q.shape == (2, 2):
        if abs(np.trace(q).real - 1.0) > 1e-8 or np.max(np.abs(q - q.conj().T)) > 1e-10:
            raise ValueError("qubit density matrix must be Hermitian with unit trace")
        return q, None
    raise DimensionMismatch(f"qubit state must have shape (2,) or (2, 2), got {q.shape}")


def _blocks_from_joint(rho, n):
    """``X_qq'`` cavity blocks of a cavity-qubit density matrix."""
    r = rho.reshape(n, 2, n, 2)
    return {(q, p): np.ascontiguousarray(r[:, q, :, p]) for q in (0, 1) for p in (0, 1)}


def _joint_from_blocks(blocks, n, inner):
    """Inverse of :func:`_blocks_from_joint` for blocks of size ``n * inner``."""
    out = np.zeros((n, 2, inner, n, 2, inner), dtype=complex)
    for (q, p), x in blocks.items():
        out[:, q, :, :, p, :] = x.reshape(n, inner, n, inner)
    d = n * 2 * inner
    return out.reshape(d, d)


# ---------------------------------------------------------------------------
# drive


@dataclass
class DriveResult:
    """Output of the drive stage.

    Iterating yields ``(state, alpha0, alpha1)``.

    Attributes
    ----------
    state : QuantumState
        Cavity-qubit state at ``t_d`` (JPM idle, not represented).
    alpha0, alpha1 : complex
        Pointer amplitudes: closed form in dispersive mode, ``<a>`` of the
        qubit-projected cavity state in Jaynes-Cummings mode.
    alpha_numeric : tuple of complex
        ``<a>`` of each qubit-projected branch of the simulated state.
    branch_fidelities : tuple of float
        Fidelity of each branch's cavity state with the coherent state of
        the reported amplitude.
    times, occupation : ndarray
        Recorded times and per-branch cavity photon numbers, shape ``(T, 2)``.
    """

    state: QuantumState
    alpha0: complex
    alpha1: complex
    alpha_numeric: tuple
    branch_fidelities: tuple
    mode: str
    times: np.ndarray = None
    occupation: np.ndarray = None
    amplitudes: np.ndarray = None

    def __iter__(self):
        return iter((self.state, self.alpha0, self.alpha1))


def _drive_n_fock(params, sched, extra=0.0):
    _, a1 = pointer_amplitudes(params, sched.t_d, sched)
    a0_max = sched.a0 / (2 * params.chi_q)
    return fock_cutoff(max(abs(a1), a0_max) + extra)


def run_drive_stage(params, qubit_state=(1.0, 0.0), mode="dispersive", *, schedule=None,
                    n_fock=None, config=None, times=None, cavity_state=None):
    """Drive the cavity for ``t_d`` with the JPM idle.

    Parameters
    ----------
    params : SystemParams
    qubit_state : array_like
        Amplitudes ``(a, b)`` or a 2x2 density matrix.
    mode : {"dispersive", "jaynes_cummings"}
    schedule : PulseSchedule, optional
    n_fock : int, optional
        Cavity truncation; defaults to the cutoff rule for the larger of
        ``|alpha_1|`` and the maximal excursion of ``alpha_0``.
    config : IntegratorConfig, optional
        Used for the fixed-step integration from the vacuum.
    times : array_like, optional
        Record times within ``[0, t_d]``.
    cavity_state : ndarray, optional
        Joint cavity-qubit density matrix replacing ``vacuum x qubit_state``
        (used by repeated runs); evolved with the exact propagator.

    Returns
    -------
    DriveResult
    """
    _check_mode(mode)
    sched = schedule or PulseSchedule.from_params(params)
    config = config or IntegratorConfig()
    n = n_fock or _drive_n_fock(params, sched)
    t_d = sched.t_d

    if cavity_state is not None:
        rho = np.asarray(cavity_state, dtype=complex)
        n_in = rho.shape[0] // 2
        # room for the incoming field plus the drive's own displacement
        mean_n = float(np.arange(n_in) @ np.einsum("aqaq->a", rho.reshape(n_in, 2, n_in, 2)).real)
        n = max(n_in, n_fock or _drive_n_fock(params, sched, extra=sqrt(max(mean_n, 0.0))))
        if n > n_in:
            padded = np.zeros((n, 2, n, 2), dtype=complex)
            padded[:n_in, :, :n_in, :] = rho.reshape(n_in, 2, n_in, 2)
            rho = padded.reshape(2 * n, 2 * n)
        layout = HilbertLayout(n, include_qubit=True, include_jpm=False)
        if mode == "dispersive":
            blocks = _blocks_from_joint(rho, n)
            lay_b = HilbertLayout(n, include_qubit=False, include_jpm=False)
            us = [propagator(hamiltonian(params, lay_b, "drive", qubit_state_branch=q, schedule=sched), t_d)
                  for q in (0, 1)]
            blocks = {(q, p): us[q] @ x @ us[p].conj().T for (q, p), x in blocks.items()}
            out = _joint_from_blocks(blocks, n, 1)
        else:
            u = propagator(hamiltonian(params, layout, "drive", "jaynes_cummings", schedule=sched), t_d)
            out = u @ rho @ u.conj().T
        state = QuantumState(out, layout)
        return _drive_result(params, sched, state, mode, None, None, None)

    rho_q, amps = _qubit_density(qubit_state)
    if mode == "dispersive":
        lay_b = HilbertLayout(n, include_qubit=False, include_jpm=False)
        vac = basis(n, 0)
        branch_traj = []
        for q in (0, 1):
            h = hamiltonian(params, lay_b, "drive", qubit_state_branch=q, schedule=sched)
            tr = evolve_schrodinger(vac, h, t_d, config, times=times)
            branch_traj.append(tr)
        psi = [np.asarray(tr.states[-1]) for tr in branch_traj]
        layout = HilbertLayout(n, include_qubit=True, include_jpm=False)
        if amps is not None:
            vec = np.zeros((n, 2), dtype=complex)
            vec[:, 0] = amps[0] * psi[0]
            vec[:, 1] = amps[1] * psi[1]
            state = QuantumState(vec.ravel(), layout)
        else:
            blocks = {(q, p): rho_q[q, p] * np.outer(psi[q], psi[p].conj()) for q in (0, 1) for p in (0, 1)}
            state = QuantumState(_joint_from_blocks(blocks, n, 1), layout)
        t_rec = branch_traj[0].times
        occ = np.stack([tr.observables["n_cavity"] for tr in branch_traj], axis=1)
        a = destroy(n)
        amp = np.stack([[np.vdot(s, a @ s) for s in tr.states] for tr in branch_traj], axis=1) \
            if config.store_states else None
        return _drive_result(params, sched, state, mode, t_rec, occ, amp)

    layout = HilbertLayout(n, include_qubit=True, include_jpm=False)
    h = hamiltonian(params, layout, "drive", "jaynes_cummings", schedule=sched)
    if amps is not None:
        psi0 = np.kron(basis(n, 0), amps)
        tr = evolve_schrodinger(QuantumState(psi0, layout), h, t_d, config, times=times)
        state = tr.final
        t_rec = tr.times
        occ = _branch_occupation_jc([s.data for s in tr.states], n) if config.store_states else None
    else:
        u = propagator(h, t_d)
        rho0 = np.kron(np.outer(basis(n, 0), basis(n, 0)), rho_q)
        state = QuantumState(u @ rho0 @ u.conj().T, layout)
        t_rec = occ = None
    return _drive_result(params, sched, state, mode, t_rec, occ, None)


def _branch_occupation_jc(vectors, n):
    out = []
    num = np.arange(n)
    for v in vectors:
        c = np.abs(v.reshape(n, 2)) ** 2
        w = c.sum(axis=0)
        out.append([num @ c[:, q] / w[q] if w[q] > 0 else 0.0 for q in (0, 1)])
    return np.array(out)


def _branch_cavity_states(state, n):
    """Normalized cavity density matrix of each qubit branch (``None`` if empty)."""
    rho = state.density_matrix().reshape(n, 2, n, 2)
    out = []
    for q in (0, 1):
        x = rho[:, q, :, q]
        w = np.trace(x).real
        out.append(x / w if w > 1e-300 else None)
    return out


def _drive_result(params, sched, state, mode, times, occ, amp):
    n = state.layout.n_fock
    a = destroy(n)
    branches = _branch_cavity_states(state, n)
    numeric = tuple(complex(np.trace(a @ b)) if b is not None else complex("nan") for b in branches)
    if mode == "dispersive":
        al0, al1 = pointer_amplitudes(params, sched.t_d, sched)
        al0, al1 = complex(al0), complex(al1)
    else:
        al0, al1 = numeric
    fids = []
    for b, al in zip(branches, (al0, al1)):
        if b is None:
            fids.append(float("nan"))
        else:
            fids.append(state_fidelity(b, displacement_matrix(al, n)[:, 0]))
    return DriveResult(state, al0, al1, numeric, tuple(fids), mode, times, occ, amp)


# ---------------------------------------------------------------------------
# measurement


@dataclass
class RunRecord:
    """Per-run outputs of the readout protocol.

    Attributes
    ----------
    click_probability : float
        Population of the JPM measured level at the end of the measurement.
    rho_click, rho_noclick : ndarray or None
        Normalized conditional qubit states (``None`` for an outcome of zero
        probability).
    times : ndarray
        Measurement-stage record times (s, from the start of the stage).
    click_trace : ndarray
        Click probability at each record time.
    cavity_occupation : ndarray
        Mean cavity photon number at each record time.
    qubit_trace, qubit_click_trace : ndarray
        Unconditional qubit state and unnormalized click-conditioned qubit
        state ``Tr_{C,J}[P_m rho]`` at each record time, shape ``(T, 2, 2)``.
    sigma_z : ndarray
        Qubit ``<sigma_z>`` at each record time.
    qubit_trace_dressed : ndarray or None
        Jaynes-Cummings mode only: qubit state in the dressed basis of the
        cavity-qubit coupling (see :func:`jc_dressing_unitary`). The bare
        reduction also moves when photons leave the cavity, because the
        dressing grows with photon number; the dressed one moves only
        when the qubit actually flips.
    final_state : QuantumState
        Cavity-qubit-JPM state at the end of the last stage run.
    """

    click_probability: float
    rho_click: np.ndarray | None
    rho_noclick: np.ndarray | None
    times: np.ndarray
    click_trace: np.ndarray
    cavity_occupation: np.ndarray
    qubit_trace: np.ndarray
    qubit_click_trace: np.ndarray
    final_state: QuantumState
    mode: str
    drive: DriveResult | None = None
    alpha_m: complex | None = None
    post_reset_cavity: dict = field(default_factory=dict)
    reset_error: dict = field(default_factory=dict)
    residual_photons: dict = field(default_factory=dict)
    qubit_trace_dressed: np.ndarray | None = None

    @property
    def sigma_z(self):
        return np.real(self.qubit_trace[:, 0, 0] - self.qubit_trace[:, 1, 1])

    @property
    def sigma_z_dressed(self):
        if self.qubit_trace_dressed is None:
            return None
        q = self.qubit_trace_dressed
        return np.real(q[:, 0, 0] - q[:, 1, 1])

    @property
    def layout(self):
        return self.final_state.layout


def _measure_layout(n, qubit):
    return HilbertLayout(n, include_qubit=qubit, include_jpm=True)


def _jpm_projector_diag(layout):
    """Boolean mask of basis states with the JPM in the measured level."""
    idx = np.indices(layout.dims).reshape(len(layout.dims), -1)
    return idx[layout.index("jpm")] == M


def _attach_ground_jpm(x):
    g = np.zeros((3, 3))
    g[G, G] = 1.0
    return np.kron(x, g)


def run_measurement_stage(state, params, t_m=None, mode=None, *, schedule=None, config=None,
                          times=None, n_fock=None):
    """Tune the JPM into resonance and let it absorb photons for ``t_m``.

    Parameters
    ----------
    state : DriveResult or QuantumState
        Cavity-qubit state from the drive stage; the JPM is attached in
        ``|g>``.
    params : SystemParams
    t_m : float, optional
        Measurement time; defaults to ``params.t_m``.
    mode : {"dispersive", "jaynes_cummings"}, optional
        Defaults to the mode of a :class:`DriveResult` input.
    times : array_like, optional
        Record times within ``[0, t_m]``.
    n_fock : int, optional
        Re-truncate (pad or cut) the cavity to this size.

    Returns
    -------
    RunRecord
    """
    drive = state if isinstance(state, DriveResult) else None
    if drive is not None:
        mode = mode or drive.mode
        state = drive.state
    mode = mode or "dispersive"
    _check_mode(mode)
    sched = schedule or PulseSchedule.from_params(params)
    config = config or IntegratorConfig(store_states=False)
    t_m = params.t_m if t_m is None else t_m
    if state.layout.include_jpm or not state.layout.include_qubit:
        raise DimensionMismatch("measurement input must be a cavity-qubit state without the JPM")
    rho = state.density_matrix()
    n = state.layout.n_fock
    if n_fock is not None and n_fock != n:
        rho = _refock(rho, n, n_fock, 2)
        n = n_fock
    if mode == "dispersive":
        out = _measure_dispersive(rho, n, params, t_m, sched, config, times)
    else:
        out = _measure_jc(rho, n, params, t_m, sched, config, times)
    rec = _record_from(out, mode)
    rec.drive = drive
    return rec


def _refock(rho, n_old, n_new, inner):
    r = rho.reshape(n_old, inner, n_old, inner)
    k = min(n_old, n_new)
    out = np.zeros((n_new, inner, n_new, inner), dtype=complex)
    out[:k, :, :k, :] = r[:k, :, :k, :]
    d = n_new * inner
    return out.reshape(d, d)


def _block_observables(layout):
    mask = _jpm_projector_diag(layout)
    num = np.repeat(np.arange(layout.n_fock), layout.dim // layout.n_fock)
    return {
        "tr": lambda x: complex(np.trace(x)),
        "tr_m": lambda x: complex(np.diagonal(x)[mask].sum()),
        "tr_n": lambda x: complex(np.diagonal(x) @ num),
    }


def _support(x, tol=1e-16):
    """Smallest Fock dimension holding all but ``tol`` of a cavity block's weight."""
    pops = np.abs(np.diag(x))
    total = pops.sum()
    above = np.cumsum(pops[::-1])[::-1]  # weight at index >= k
    k = int(np.argmax(above <= tol * max(total, 1e-300))) if np.any(above <= tol * total) else len(pops)
    return k


def _measure_dispersive(rho, n, params, t_m, sched, config, times):
    blocks = _blocks_from_joint(rho, n)
    ds_cache = {}
    results = {}
    traj = None
    for q, p in ((0, 0), (1, 1), (0, 1)):
        x = blocks[(q, p)]
        scale = np.trace(x).real if q == p else 1.0
        if q == p and scale < 1e-14:
            continue
        if q != p and np.max(np.abs(x)) < 1e-14:
            continue
        # no photons are created during measurement: a diagonal block can be
        # cut to its initial Fock support (two spare levels keep the
        # truncation probe meaningful)
        nb = n if q != p else min(n, max(_support(x) + 2, 3))
        lay = _measure_layout(nb, qubit=False)
        if nb not in ds_cache:
            ds_cache[nb] = (
                build_dissipators(params, lay, "measure"),
                [hamiltonian(params, lay, "measure", qubit_state_branch=b, schedule=sched) for b in (0, 1)],
                _block_observables(lay),
            )
        ds, hs, obs = ds_cache[nb]
        x0 = _attach_ground_jpm(x[:nb, :nb] / scale)
        if q == p:
            tr = evolve_lindblad(QuantumState(x0, lay), hs[q], ds, t_m, config, times=times, observables=obs)
        else:
            tr = evolve_lindblad(x0, hs[0], ds, t_m, config, times=times, observables=obs,
                                 hamiltonian_right=hs[1], check_fock=False)
        final = tr.final.data if isinstance(tr.final, QuantumState) else tr.final
        if nb < n:
            final = _refock(final, nb, n, 3)
        results[(q, p)] = (scale, tr, final)
        traj = tr
    t_rec = traj.times
    T = len(t_rec)
    qt = np.zeros((T, 2, 2), dtype=complex)
    qm = np.zeros((T, 2, 2), dtype=complex)
    occ = np.zeros(T)
    final_blocks = {}
    for (q, p), (scale, tr, final) in results.items():
        o = tr.observables
        qt[:, q, p] = scale * o["tr"]
        qm[:, q, p] = scale * o["tr_m"]
        if q == p:
            occ += scale * np.real(o["tr_n"])
        final_blocks[(q, p)] = scale * final
    if (0, 1) in final_blocks:
        qt[:, 1, 0] = qt[:, 0, 1].conj()
        qm[:, 1, 0] = qm[:, 0, 1].conj()
        final_blocks[(1, 0)] = final_blocks[(0, 1)].conj().T
    final = _joint_from_blocks(final_blocks, n, 3)
    layout = _measure_layout(n, qubit=True)
    return t_rec, qt, qm, occ, QuantumState(final, layout)


def _qubit_reduce(layout):
    n = layout.n_fock

    def full(x):
        return np.einsum("aqjapj->qp", x.reshape(n, 2, 3, n, 2, 3))

    def click(x):
        r = x.reshape(n, 2, 3, n, 2, 3)
        return np.einsum("aqap->qp", r[:, :, M, :, :, M])

    return {"qubit": full, "qubit_m": click}


def _measure_jc(rho, n, params, t_m, sched, config, times):
    lay = _measure_layout(n, qubit=True)
    x0 = np.kron(rho, np.diag([1.0, 0.0, 0.0]))
    h = hamiltonian(params, lay, "measure", "jaynes_cummings", schedule=sched)
    ds = build_dissipators(params, lay, "measure")
    obs = _qubit_reduce(lay)
    uf = np.kron(jc_dressing_unitary(params, n), np.eye(3))
    full = obs["qubit"]
    obs["qubit_dressed"] = lambda x: full(uf.T @ x @ uf)
    tr = evolve_lindblad(QuantumState(x0, lay), h, ds, t_m, config, times=times, observables=obs)
    o = tr.observables
    return tr.times, o["qubit"], o["qubit_m"], o["n_cavity"], tr.final, o["qubit_dressed"]


def _normalized(m):
    w = np.trace(m).real
    if w <= 1e-300:
        return None
    return m / w


def _record_from(out, mode):
    t_rec, qt, qm, occ, final = out[:5]
    dressed = out[5] if len(out) > 5 else None
    p_click = np.real(np.trace(qm, axis1=1, axis2=2))
    q_final = qt[-1]
    qm_final = qm[-1]
    return RunRecord(
        click_probability=float(np.clip(p_click[-1], 0.0, 1.0)),
        rho_click=_normalized(qm_final),
        rho_noclick=_normalized(q_final - qm_final),
        times=np.asarray(t_rec),
        click_trace=p_click,
        cavity_occupation=np.asarray(occ, dtype=float),
        qubit_trace=qt,
        qubit_click_trace=qm,
        final_state=final,
        mode=mode,
        qubit_trace_dressed=dressed,
    )


# ---------------------------------------------------------------------------
# reset


def _reset_amplitude(cav_rho, fallback_phase):
    n = cav_rho.shape[0]
    a = destroy(n)
    mean_n = float(np.trace(np.diag(np.arange(n)) @ cav_rho).real)
    ea = complex(np.trace(a @ cav_rho))
    phase = np.angle(ea) if abs(ea) > 1e-12 else fallback_phase
    return sqrt(max(mean_n, 0.0)) * np.exp(1j * phase)


def _cavity_view(rho, layout):
    """Cavity-qubit-JPM view of ``rho`` with singleton axes for missing factors."""
    n = layout.n_fock
    dq = 2 if layout.include_qubit else 1
    dj = 3 if layout.include_jpm else 1
    return rho.reshape(n, dq, dj, n, dq, dj), n, dq, dj


def run_reset_stage(state, params, *, alpha_m=None, schedule=None, branch_outcome=1):
    """Apply ``U_r = 1 x |0><0| + D(beta) x |1><1|`` with ``beta = -alpha_M``.

    Parameters
    ----------
    state : RunRecord or QuantumState
        Measurement output, or a bare state. A cavity-only state is treated
        as the qubit-``|1>`` branch.
    params : SystemParams
    alpha_m : complex, optional
        Amplitude to remove. Defaults to ``sqrt(<n>)`` of the cavity state in
        the qubit-``|1>`` branch conditioned on ``branch_outcome`` (click by
        default), with the phase of its ``<a>``.
    branch_outcome : {1, 0, None}
        Conditioning used to determine ``alpha_M``; ``None`` uses the
        unconditional branch state.

    Returns
    -------
    RunRecord
        Copy of the input record (or a minimal record) with the post-reset
        state, ``alpha_m``, and per qubit branch the residual photon number
        and vacuum infidelity.
    """
    sched = schedule or PulseSchedule.from_params(params)
    record = state if isinstance(state, RunRecord) else None
    qs = record.final_state if record is not None else state
    layout = qs.layout
    rho = qs.density_matrix()
    view, n, dq, dj = _cavity_view(rho, layout)

    if alpha_m is None:
        q1 = 1 if dq == 2 else 0
        sub = view[:, q1, :, :, q1, :]
        if dj == 3 and branch_outcome is not None:
            js = [M] if branch_outcome == 1 else [G, 1]
            cav = sum(sub[:, j, :, j] for j in js)
        else:
            cav = np.einsum("ajbj->ab", sub)
        w = np.trace(cav).real
        if w < 1e-14:
            cav = np.einsum("ajbj->ab", sub)
            w = np.trace(cav).real
        _, a1 = pointer_amplitudes(params, sched.t_d, sched)
        fallback = float(np.angle(a1)) if abs(a1) > 0 else 0.0
        alpha_m = _reset_amplitude(cav / w, fallback) if w > 1e-14 else 0.0
    beta = -alpha_m
    d = displacement_matrix(beta, n)
    out = view.copy()
    q1 = 1 if dq == 2 else 0
    # rows in qubit branch 1 get D, columns in branch 1 get D^+
    out[:, q1] = np.einsum("ab,bjcqk->ajcqk", d, out[:, q1])
    out[:, :, :, :, q1] = np.einsum("aqjck,cb->aqjbk", out[:, :, :, :, q1], d.conj().T)
    rho_out = out.reshape(rho.shape)
    new_state = QuantumState(rho_out, layout)

    post, err, resid = {}, {}, {}
    for q in range(dq):
        sub = out[:, q, :, :, q, :]
        cav = np.einsum("ajbj->ab", sub)
        w = np.trace(cav).real
        key = q if dq == 2 else 1
        if w < 1e-14:
            continue
        cav = cav / w
        post[key] = cav
        err[key] = float(1.0 - cav[0, 0].real)
        resid[key] = float(np.arange(n) @ np.diag(cav).real)

    if record is None:
        record = RunRecord(
            click_probability=float("nan"), rho_click=None, rho_noclick=None,
            times=np.array([]), click_trace=np.array([]), cavity_occupation=np.array([]),
            qubit_trace=np.zeros((0, 2, 2)), qubit_click_trace=np.zeros((0, 2, 2)),
            final_state=new_state, mode="dispersive",
        )
    else:
        record = replace(record)
    record.final_state = new_state
    record.alpha_m = complex(alpha_m)
    record.post_reset_cavity = post
    record.reset_error = err
    record.residual_photons = resid
    return record


# ---------------------------------------------------------------------------
# composite protocols


def run_full_protocol(params, qubit_state=(1.0, 0.0), mode="dispersive", *, schedule=None,
                      config=None, times=None, reset=True):
    """Drive, measure for ``params.t_m`` and (optionally) reset."""
    sched = schedule or PulseSchedule.from_params(params)
    drive = run_drive_stage(params, qubit_state, mode, schedule=sched, config=config and config.replace(store_states=True))
    mcfg = (config or IntegratorConfig()).replace(store_states=False)
    rec = run_measurement_stage(drive, params, params.t_m, mode, schedule=sched, config=mcfg, times=times)
    if reset:
        rec = run_reset_stage(rec, params, schedule=sched)
    return rec


def _split_outcomes(final_state):
    """Unnormalized cavity-qubit states for no-click (0) and click (1)."""
    view, n, dq, dj = _cavity_view(final_state.density_matrix(), final_state.layout)
    d = n * dq
    click = view[:, :, M, :, :, M].reshape(d, d)
    noclick = (view[:, :, G, :, :, G] + view[:, :, 1, :, :, 1]).reshape(d, d)
    return {0: noclick, 1: click}


def _reset_between(rho_cq, n, params, sched, reset_mode, alpha_m):
    if reset_mode == "ideal":
        r = rho_cq.reshape(n, 2, n, 2)
        rq = np.einsum("aqap->qp", r)
        vac = np.zeros((n, n))
        vac[0, 0] = 1.0
        return np.kron(vac, rq)
    if reset_mode == "displacement":
        d = displacement_matrix(-alpha_m, n)
        u = np.kron(d, np.diag([0.0, 1.0])) + np.kron(np.eye(n), np.diag([1.0, 0.0]))
        return u @ rho_cq @ u.conj().T
    if reset_mode == "none":
        return rho_cq
    raise ValueError(f"unknown reset_mode {reset_mode!r}")


def run_repeated_protocol(params, qubit_state=(1.0, 0.0), mode="dispersive", reset_between=True, *,
                          reset_mode="ideal", schedule=None, config=None):
    """Two back-to-back readouts; joint outcome probabilities.

    The first run's post-measurement state is split by outcome, reset, and
    fed to the second run with the JPM returned to ``|g>``; the qubit is
    not re-prepared.

    Parameters
    ----------
    reset_between : bool
        ``False`` leaves the cavity as the first measurement left it.
    reset_mode : {"ideal", "displacement"}
        ``ideal`` returns the cavity to vacuum; ``displacement`` applies the
        conditional displacement of :func:`run_reset_stage`.

    Returns
    -------
    dict
        ``P00, P01, P10, P11`` (``P_ab``: second outcome ``a``, first
        outcome ``b``) and the single-run probabilities ``P0, P1``.
    """
    sched = schedule or PulseSchedule.from_params(params)
    mcfg = (config or IntegratorConfig()).replace(store_states=False)
    first = run_full_protocol(params, qubit_state, mode, schedule=sched, config=config, reset=False)
    n = first.layout.n_fock
    alpha_m = run_reset_stage(first, params, schedule=sched).alpha_m if reset_mode == "displacement" else None
    parts = _split_outcomes(first.final_state)
    probs = {}
    for b, rho_b in parts.items():
        w = np.trace(rho_b).real
        probs[f"P{b}"] = w
        if w < 1e-15:
            for a in (0, 1):
                probs[f"P{a}{b}"] = 0.0
            continue
        rho_b = rho_b / w
        if reset_between:
            rho_b = _reset_between(rho_b, n, params, sched, reset_mode, alpha_m)
        drive = run_drive_stage(params, mode=mode, schedule=sched, cavity_state=rho_b)
        rec = run_measurement_stage(drive, params, params.t_m, mode, schedule=sched, config=mcfg)
        p1 = rec.click_probability
        probs[f"P1{b}"] = w * p1
        probs[f"P0{b}"] = w * (1.0 - p1)
    return {k: probs[k] for k in ("P00", "P01", "P10", "P11", "P0", "P1")}


# ---------------------------------------------------------------------------
# detection and channel helpers


def detection_trace(params, alpha_sq, t_m, *, branch=1, times=None, config=None, schedule=None,
                    jpm_initial=G, n_fock=None):
    """JPM click probability versus time for a coherent cavity input.

    The cavity starts in a coherent state of mean photon number
    ``alpha_sq`` (phase of the drive-stage pointer), the JPM in
    ``jpm_initial``, and the qubit is fixed in ``branch``.

    Returns
    -------
    times, click_probability : ndarray
    trajectory : Trajectory
    """
    sched = schedule or PulseSchedule.from_params(params)
    alpha = -1j * sqrt(alpha_sq)
    n = n_fock or fock_cutoff(abs(alpha))
    lay = _measure_layout(n, qubit=False)
    cav = coherent_state(alpha, n).data
    jpm = np.zeros(3)
    jpm[jpm_initial] = 1.0
    psi = np.kron(cav, jpm)
    h = hamiltonian(params, lay, "measure", qubit_state_branch=branch, schedule=sched)
    ds = build_dissipators(params, lay, "measure")
    config = config or IntegratorConfig(store_states=False)
    tr = evolve_lindblad(QuantumState(psi, lay), h, ds, t_m, config, times=times)
    return tr.times, tr.observables["p_m"], tr


class ReadoutChannel:
    """Unconditional qubit channel of drive plus measurement.

    ``channel(rho_q)`` returns the qubit state after the measurement stage;
    ``channel.trace(rho_q)`` returns it at every record time. In dispersive
    mode the cavity-JPM blocks of unit coherence are evolved once and
    combined linearly for any input; in Jaynes-Cummings mode each input is
    a separate simulation.
    """

    def __init__(self, params, mode="dispersive", t_m=None, *, times=None, schedule=None, config=None):
        _check_mode(mode)
        self.params = params
        self.mode = mode
        self.t_m = params.t_m if t_m is None else t_m
        self.times_req = times
        self.schedule = schedule or PulseSchedule.from_params(params)
        self.config = config or IntegratorConfig(store_states=False)
        self._unit = None
        self.times = None

    def _unit_blocks(self):
        if self._unit is None:
            full = (np.ones((2, 2)) / 2).astype(complex)
            # rho_q with all entries 1/2 excites every block with unit weight / 2
            drive = run_drive_stage(self.params, full, "dispersive", schedule=self.schedule)
            rec = run_measurement_stage(drive, self.params, self.t_m, "dispersive", schedule=self.schedule,
                                        config=self.config, times=self.times_req)
            self._unit = 2.0 * rec.qubit_trace
            self.times = rec.times
        return self._unit

    def trace(self, rho_q):
        rho_q = np.asarray(rho_q, dtype=complex)
        if self.mode == "dispersive":
            return self._unit_blocks() * rho_q[None, :, :]
        drive = run_drive_stage(self.params, rho_q, "jaynes_cummings", schedule=self.schedule) \
            if not _is_pure_qubit(rho_q) else \
            run_drive_stage(self.params, _pure_amplitudes(rho_q), "jaynes_cummings", schedule=self.schedule)
        rec = run_measurement_stage(drive, self.params, self.t_m, "jaynes_cummings", schedule=self.schedule,
                                    config=self.config, times=self.times_req)
        self.times = rec.times
        return rec.qubit_trace

    def __call__(self, rho_q):
        return self.trace(rho_q)[-1]


def _is_pure_qubit(rho_q):
    return abs(np.trace(rho_q @ rho_q).real - 1.0) < 1e-12


def _pure_amplitudes(rho_q):
    w, v = np.linalg.eigh(rho_q)
    vec = v[:, -1]
    k = np.argmax(np.abs(vec))
    return vec * np.exp(-1j * np.angle(vec[k]))


def branching_trace(params, duration, *, times=None, config=None, cavity=False):
    """Measured-level population of a JPM started in ``|e>`` with the cavity empty.

    With ``cavity=False`` the JPM is evolved on its own (a single Fock
    level, so no exchange with the cavity): the excitation either tunnels
    or relaxes, and ``p_m`` saturates at ``gamma_J / (gamma_J + gamma_R)``
    when dark counts are off. ``cavity=True`` keeps the resonant exchange
    with the cavity, which delays but does not change the branching.

    Returns
    -------
    times, p_m : ndarray
    """
    n = 4 if cavity else 1
    lay = _measure_layout(n, qubit=False)
    psi = np.kron(basis(n, 0), basis(3, E))
    h = hamiltonian(params, lay, "measure", qubit_state_branch=1)
    ds = build_dissipators(params, lay, "measure")
    config = config or IntegratorConfig(store_states=False)
    tr = evolve_lindblad(QuantumState(psi, lay), h, ds, duration, config, times=times, check_fock=cavity)
    return tr.times, tr.observables["p_m"]


def protocol_frequency_scale(params, mode="dispersive", schedule=None):
    """Fastest scale (rad/s) of any generator the drive and measurement stages use.

    Evaluated at the Fock cutoff of the working point, so ``dt`` times this
    value is what the per-run step bound sees.
    """
    _check_mode(mode)
    sched = schedule or PulseSchedule.from_params(params)
    n = _drive_n_fock(params, sched)
    scales = []
    if mode == "dispersive":
        lay_d = HilbertLayout(n, include_qubit=False, include_jpm=False)
        lay_m = _measure_layout(n, qubit=False)
        ds = build_dissipators(params, lay_m, "measure")
        for q in (0, 1):
            scales.append(frequency_scale(hamiltonian(params, lay_d, "drive", qubit_state_branch=q,
                                                      schedule=sched)))
            scales.append(frequency_scale(hamiltonian(params, lay_m, "measure", qubit_state_branch=q,
                                                      schedule=sched), ds))
    else:
        lay_d = HilbertLayout(n, include_qubit=True, include_jpm=False)
        lay_m = _measure_layout(n, qubit=True)
        scales.append(frequency_scale(hamiltonian(params, lay_d, "drive", mode, schedule=sched)))
        scales.append(frequency_scale(hamiltonian(params, lay_m, "measure", mode, schedule=sched),
                                      build_dissipators(params, lay_m, "measure")))
    return max(scales)
