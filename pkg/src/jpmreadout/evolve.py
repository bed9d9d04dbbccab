"""Time integrators for the Lindblad and Schrödinger equations.

The master equation is written as

    d rho / dt = A + A^+ + sum_k gamma_k L_k rho L_k^+,    A = -i H_eff rho,

with ``H_eff = H - (i/2) sum_k gamma_k L_k^+ L_k``. Building the commutator
and anticommutator from a single product keeps the right-hand side exactly
Hermitian in floating point, and needs one matrix product per evaluation.
``H_eff`` is stored in CSR form: the generators here have a handful of
nonzeros per row, so a sparse-dense product is an order of magnitude
cheaper than a dense one. Jump operators that act on one tensor factor are
applied by slicing the reshaped density matrix rather than by matrix
products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from . import _kernels
from .errors import DimensionMismatch, StepSizeError, TruncationError
from .hilbert import HilbertLayout, Operator, QuantumState
from .model import frequency_scale

METHODS = ("rk4_fixed", "rk45_adaptive")

TRACE_TOL = 1e-8
EIG_TOL = 1e-8
HERM_TOL = 1e-10
TOP_FOCK_TOL = 1e-6
STEP_SAFETY = 0.02


@dataclass(frozen=True)
class IntegratorConfig:
    """Integrator settings.

    Parameters
    ----------
    method : {"rk4_fixed", "rk45_adaptive"}
    dt : float
        Upper bound on the fixed step (s). Each recording interval is split
        into an integer number of equal steps no longer than ``dt``.
    rtol, atol : float
        Tolerances of the adaptive method.
    record_stride : int, optional
        Record every ``record_stride`` steps. Defaults to one record per
        ``record_interval`` of simulated time.
    record_interval : float
        Default spacing of recorded times (s).
    hermitize_every : int
        Steps between ``rho <- (rho + rho^+)/2`` symmetrizations.
    store_states : bool
        Keep the state at every recorded time (otherwise only the last).
    check_step_bound : bool
        Enforce ``dt <= 0.02 / (fastest scale of the generator)``.
    check_physical : bool
        Raise :class:`StepSizeError` when a recorded state leaves the
        physical set (trace, positivity, Hermiticity).
    retry : bool
        On a physicality failure, halve ``dt`` and retry once.
    backend : {"auto", "numpy", "numba"}
        ``auto`` uses the compiled kernel when numba is installed and every
        jump operator is a single matrix unit on one factor.
    """

    method: str = "rk4_fixed"
    dt: float = 1e-12
    rtol: float = 1e-9
    atol: float = 1e-11
    record_stride: int | None = None
    record_interval: float = 0.5e-9
    hermitize_every: int = 100
    store_states: bool = True
    check_step_bound: bool = True
    check_physical: bool = True
    retry: bool = True
    backend: str = "auto"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.backend not in ("auto", "numpy", "numba"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.record_stride is not None and self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")

    def replace(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class Trajectory:
    """Recorded times, states and observables of one integration."""

    times: np.ndarray
    states: list
    observables: dict = field(default_factory=dict)
    dt: float | None = None
    layout: HilbertLayout | None = None

    @property
    def final(self):
        return self.states[-1]

    def __len__(self):
        return len(self.times)


# ---------------------------------------------------------------------------
# generator assembly


def _as_matrix(op):
    if isinstance(op, Operator):
        return op.matrix
    return np.asarray(op, dtype=complex)


def _jump_applier(op, layout):
    """Return ``f(rho, out, scale)`` adding ``scale * L rho L^+`` to ``out``."""
    mat = _as_matrix(op)
    local = getattr(op, "local", None)
    if local is not None and layout is not None:
        sub, lmat = local
        idx = layout.index(sub)
        dims = layout.dims
        before = int(np.prod(dims[:idx], dtype=int))
        d = dims[idx]
        after = int(np.prod(dims[idx + 1:], dtype=int))
        shape = (before, d, after, before, d, after)
        nz = np.argwhere(np.abs(lmat) > 0)
        if len(nz) == 1:
            (x, y), = nz
            w = abs(lmat[x, y]) ** 2

            def apply(rho, out, scale):
                r = rho.reshape(shape)
                o = out.reshape(shape)
                o[:, x, :, :, x, :] += (scale * w) * r[:, y, :, :, y, :]

            apply.unit = (w, x, y, before, d, after)
            return apply

        def apply(rho, out, scale):
            r = rho.reshape(shape)
            t = np.tensordot(lmat, r, axes=([1], [1]))  # (d, b, a, b, d, a)
            t = np.tensordot(t, lmat.conj(), axes=([4], [1]))  # (d, b, a, b, a, d)
            out += scale * t.transpose(1, 0, 2, 3, 5, 4).reshape(out.shape)

        return apply

    smat = sp.csr_matrix(mat)
    smat_h = sp.csr_matrix(mat.conj().T)

    def apply(rho, out, scale):
        out += scale * (smat @ (smat_h.T @ rho.T).T)

    return apply


class LindbladGenerator:
    """Right-hand side of the master equation for a static generator.

    ``hamiltonian_right`` selects the two-sided form
    ``d X/dt = -i(H_L X - X H_R) + dissipator(X)``, used for off-diagonal
    blocks ``|q><q'|`` of block-diagonal problems; ``X`` is then not
    Hermitian.
    """

    def __init__(self, hamiltonian, dissipators=(), layout=None, hamiltonian_right=None):
        h = _as_matrix(hamiltonian)
        self.dim = h.shape[0]
        self.layout = layout if layout is not None else getattr(hamiltonian, "layout", None)
        self.dissipators = [c for c in dissipators if c.rate > 0]
        for c in self.dissipators:
            if _as_matrix(c.operator).shape != h.shape:
                raise DimensionMismatch("dissipator and Hamiltonian dimensions differ")
        loss = np.zeros_like(h)
        for c in self.dissipators:
            lm = _as_matrix(c.operator)
            loss += c.rate * (lm.conj().T @ lm)
        self.hermitian = hamiltonian_right is None
        self.m_left = sp.csr_matrix(-1j * (h - 0.5j * loss))
        if not self.hermitian:
            hr = _as_matrix(hamiltonian_right)
            if hr.shape != h.shape:
                raise DimensionMismatch("left and right Hamiltonians differ in dimension")
            self.m_right = sp.csr_matrix(-1j * (hr - 0.5j * loss))
        self._jumps = [(c.rate, _jump_applier(c.operator, self.layout)) for c in self.dissipators]
        self.scale = frequency_scale(h, self.dissipators)
        if not self.hermitian:
            self.scale = max(self.scale, frequency_scale(hr))
        self.kernel_args = self._kernel_args()

    def _kernel_args(self):
        if not _kernels.HAVE_NUMBA:
            return None
        rows = []
        for rate, apply in self._jumps:
            unit = getattr(apply, "unit", None)
            if unit is None:
                return None
            w, x, y, before, d, after = unit
            rows.append((rate * w, x, y, before, d, after))
        jumps = np.array(rows, dtype=float).reshape(-1, 6)
        ml = self.m_left
        mr = ml if self.hermitian else self.m_right
        ml.sort_indices()
        mr.sort_indices()
        return (ml.indptr.astype(np.int64), ml.indices.astype(np.int64), ml.data.astype(complex),
                mr.indptr.astype(np.int64), mr.indices.astype(np.int64), mr.data.astype(complex),
                self.hermitian, jumps)

    def __call__(self, rho):
        a = self.m_left @ rho
        if self.hermitian:
            out = a + a.conj().T
        else:
            out = a + (self.m_right @ rho.conj().T).conj().T
        for rate, apply in self._jumps:
            apply(rho, out, rate)
        return out


class _TimeDependentGenerator:
    def __init__(self, source, dissipators, layout):
        self.source = source
        self.dissipators = dissipators
        self.layout = layout
        self.hermitian = True
        self._cache = {}
        self.scale = self.at(0.0).scale

    def at(self, t):
        gen = self._cache.get(t)
        if gen is None:
            if len(self._cache) > 8:
                self._cache.clear()
            gen = LindbladGenerator(self.source(t), self.dissipators, self.layout)
            self._cache[t] = gen
        return gen


def _generator(hamiltonian, dissipators, layout, hamiltonian_right=None):
    if callable(hamiltonian) and not isinstance(hamiltonian, (Operator, np.ndarray)):
        if hamiltonian_right is not None:
            raise ValueError("two-sided form needs static Hamiltonians")
        return _TimeDependentGenerator(hamiltonian, dissipators, layout)
    return LindbladGenerator(hamiltonian, dissipators, layout, hamiltonian_right)


# ---------------------------------------------------------------------------
# probes


def _probe(rho, layout, hermitian, check_fock=True):
    """Physicality numbers of a raw density matrix."""
    out = {}
    diag = np.real(np.diag(rho))
    out["trace"] = complex(np.trace(rho)) if not hermitian else float(diag.sum())
    if hermitian:
        out["hermiticity"] = float(np.max(np.abs(rho - rho.conj().T)))
        out["min_eig"] = float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])
    if layout is not None and layout.dim == rho.shape[0]:
        pops = diag.reshape(layout.dims)
        n = layout.n_fock
        fock = pops.reshape(n, -1).sum(axis=1)
        out["n_cavity"] = float(np.arange(n) @ fock)
        out["fock_top"] = float(fock[-1])
        if layout.include_qubit:
            q = pops.sum(axis=0)
            q = q.sum(axis=-1) if layout.include_jpm else q
            out["sigma_z"] = float(q[0] - q[1])
        if layout.include_jpm:
            j = pops.reshape(-1, 3).sum(axis=0)
            out["p_g"], out["p_e"], out["p_m"] = (float(v) for v in j)
    return out


def _check_physical(probe):
    problems = []
    if abs(probe["trace"] - 1.0) > TRACE_TOL:
        problems.append(f"trace error {abs(probe['trace'] - 1.0):.3g}")
    if probe["min_eig"] < -EIG_TOL:
        problems.append(f"min eigenvalue {probe['min_eig']:.3g}")
    if probe["hermiticity"] > HERM_TOL:
        problems.append(f"Hermiticity error {probe['hermiticity']:.3g}")
    return problems


# ---------------------------------------------------------------------------
# drivers


def _record_times(duration, config, times):
    if times is not None:
        t = np.asarray(times, dtype=float)
        if t.ndim != 1 or len(t) == 0:
            raise ValueError("times must be a nonempty 1-d array")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if t[0] < 0 or t[-1] > duration * (1 + 1e-12):
            raise ValueError("times must lie in [0, duration]")
        if t[0] > 0:
            t = np.concatenate([[0.0], t])
        return t, times is not None and np.asarray(times)[0] > 0
    if duration <= 0:
        return np.array([0.0]), False
    if config.record_stride is not None:
        span = config.record_stride * config.dt
    else:
        span = config.record_interval
    n = max(1, int(ceil(duration / span - 1e-9)))
    t = np.linspace(0.0, duration, n + 1)
    return t, False


def _rk4_segment(gen, rho, t0, h, n, hermitize_every, step_counter, backend="auto"):
    static = isinstance(gen, LindbladGenerator)
    if static and backend != "numpy" and gen.kernel_args is not None:
        rho = np.ascontiguousarray(rho, dtype=complex)
        step_counter[0] = _kernels.rk4_steps(rho, n, h, *gen.kernel_args, hermitize_every, step_counter[0])
        return rho
    if backend == "numba":
        raise ValueError("the compiled kernel does not support this generator")
    for i in range(n):
        t = t0 + i * h
        if static:
            f1 = f2 = f3 = gen
        else:
            f1, f2, f3 = gen.at(t), gen.at(t + 0.5 * h), gen.at(t + h)
        k1 = f1(rho)
        k2 = f2(rho + (0.5 * h) * k1)
        k3 = f2(rho + (0.5 * h) * k2)
        k4 = f3(rho + h * k3)
        k1 += k4
        k2 += k3
        k1 += 2.0 * k2
        rho = rho + (h / 6.0) * k1
        step_counter[0] += 1
        if hermitize_every and gen.hermitian and step_counter[0] % hermitize_every == 0:
            rho = 0.5 * (rho + rho.conj().T)
    return rho


def _integrate(gen, rho0, layout, duration, config, times, probe_physical, check_fock, extra=None):
    t_rec, drop_first = _record_times(duration, config, times)
    rho = np.array(rho0, dtype=complex)
    states, obs = [], {}
    used = []

    def record(r):
        p = _probe(r, layout, gen.hermitian and probe_physical, check_fock)
        if gen.hermitian and probe_physical:
            problems = _check_physical(p)
            if problems:
                raise StepSizeError("; ".join(problems))
        if check_fock and "fock_top" in p and p["fock_top"] > TOP_FOCK_TOL:
            raise TruncationError(
                f"top Fock level population {p['fock_top']:.3g} exceeds {TOP_FOCK_TOL:g}; increase n_fock"
            )
        if extra:
            for k, fn in extra.items():
                p[k] = fn(r)
        for k, v in p.items():
            obs.setdefault(k, []).append(v)
        if config.store_states or not states:
            states.append(r.copy())
        else:
            states[-1] = r.copy()

    record(rho)
    counter = [0]
    if config.method == "rk4_fixed":
        for a, b in zip(t_rec[:-1], t_rec[1:]):
            n = max(1, int(ceil((b - a) / config.dt - 1e-9)))
            h = (b - a) / n
            used.append(h)
            rho = _rk4_segment(gen, rho, a, h, n, config.hermitize_every, counter, config.backend)
            record(rho)
    else:
        d = rho.shape[0]
        static = isinstance(gen, LindbladGenerator)

        def fun(t, y):
            g = gen if static else gen.at(t)
            return g(y.reshape(d, d)).ravel()

        sol = solve_ivp(fun, (0.0, t_rec[-1]), rho.ravel(), method="RK45", t_eval=t_rec,
                        rtol=config.rtol, atol=config.atol)
        if not sol.success:
            raise StepSizeError(f"adaptive integration failed: {sol.message}")
        for k in range(1, sol.y.shape[1]):
            r = sol.y[:, k].reshape(d, d)
            if gen.hermitian:
                r = 0.5 * (r + r.conj().T)
            record(r)

    times_out = t_rec
    if drop_first:
        times_out = t_rec[1:]
        states = states[1:] if config.store_states else states
        obs = {k: v[1:] for k, v in obs.items()}
    return times_out, states, {k: np.asarray(v) for k, v in obs.items()}, (min(used) if used else None)


def _check_step_bound(gen, config):
    if config.method != "rk4_fixed" or not config.check_step_bound:
        return
    if gen.scale > 0 and config.dt > STEP_SAFETY / gen.scale:
        raise StepSizeError(
            f"dt = {config.dt:.3g} s exceeds {STEP_SAFETY} / {gen.scale:.3g} rad/s"
            f" = {STEP_SAFETY / gen.scale:.3g} s"
        )


def _layout_of(state, hamiltonian):
    if isinstance(state, QuantumState):
        return state.layout
    return getattr(hamiltonian, "layout", None)


def evolve_lindblad(state, hamiltonian, dissipators=(), duration=0.0, config=None, times=None,
                    hamiltonian_right=None, check_fock=True, observables=None):
    """Integrate the Lindblad master equation.

    Parameters
    ----------
    state : QuantumState or ndarray
        Initial state; pure states are promoted to density matrices. With
        ``hamiltonian_right`` any square operator is accepted.
    hamiltonian : Operator, ndarray or callable
        Static Hamiltonian, or ``t -> Operator`` for a time-dependent one.
    dissipators : iterable of Channel
        Channels with ``operator`` and ``rate``.
    duration : float
        Integration time (s).
    config : IntegratorConfig
    times : array_like, optional
        Times at which to record. Defaults to a uniform grid with spacing
        ``config.record_interval``.
    hamiltonian_right : Operator, optional
        Two-sided form ``-i(H X - X H_R)``; physicality probes are skipped.
    check_fock : bool
        Raise :class:`TruncationError` when the top Fock level is populated.
    observables : dict, optional
        Extra ``name -> f(rho)`` evaluated on the raw matrix at each record.

    Returns
    -------
    Trajectory
        States are returned as :class:`QuantumState` when the initial state
        carried a layout and the evolution is one-sided.

    Raises
    ------
    StepSizeError
        If a physicality probe fails after one retry at ``dt / 2``, or if
        ``dt`` violates the step bound.
    TruncationError
        If the top Fock level gains more than ``1e-6`` population.
    """
    config = config or IntegratorConfig()
    layout = _layout_of(state, hamiltonian)
    if isinstance(state, QuantumState):
        rho0 = state.density_matrix()
    else:
        rho0 = np.asarray(state, dtype=complex)
        if rho0.ndim == 1:
            rho0 = np.outer(rho0, rho0.conj())
    gen = _generator(hamiltonian, dissipators, layout, hamiltonian_right)
    dim = gen.dim if isinstance(gen, LindbladGenerator) else gen.at(0.0).dim
    if rho0.shape != (dim, dim):
        raise DimensionMismatch(f"state shape {rho0.shape} does not match the generator")
    _check_step_bound(gen, config)
    args = (layout, duration, config, times, config.check_physical, check_fock, observables)
    try:
        res = _integrate(gen, rho0, *args)
    except StepSizeError:
        if not (config.retry and config.method == "rk4_fixed"):
            raise
        args = (layout, duration, config.replace(dt=0.5 * config.dt), times, config.check_physical, check_fock,
                observables)
        res = _integrate(gen, rho0, *args)
    times_out, states, obs, h = res
    if isinstance(state, QuantumState) and gen.hermitian:
        states = [QuantumState(s, layout) for s in states]
    return Trajectory(times_out, states, obs, h, layout)


def evolve_schrodinger(state, hamiltonian, duration=0.0, config=None, times=None):
    """Integrate ``d psi/dt = -i H psi`` for a pure state.

    ``rk4_fixed`` uses the same step subdivision as :func:`evolve_lindblad`;
    ``rk45_adaptive`` delegates to :func:`scipy.integrate.solve_ivp`.
    Observables recorded: ``norm`` and, with a layout, the same diagonal
    observables as the Lindblad driver.
    """
    config = config or IntegratorConfig()
    layout = _layout_of(state, hamiltonian)
    psi = state.data if isinstance(state, QuantumState) else np.asarray(state, dtype=complex)
    if psi.ndim != 1:
        raise ValueError("evolve_schrodinger needs a pure state")
    static = not (callable(hamiltonian) and not isinstance(hamiltonian, (Operator, np.ndarray)))

    def mat_at(t):
        return sp.csr_matrix(-1j * _as_matrix(hamiltonian if static else hamiltonian(t)))

    m0 = mat_at(0.0)
    if m0.shape[0] != psi.shape[0]:
        raise DimensionMismatch("state and Hamiltonian dimensions differ")
    h0 = _as_matrix(hamiltonian if static else hamiltonian(0.0))
    scale = frequency_scale(h0)
    if config.method == "rk4_fixed" and config.check_step_bound and scale > 0 and config.dt > STEP_SAFETY / scale:
        raise StepSizeError(f"dt = {config.dt:.3g} s exceeds {STEP_SAFETY} / {scale:.3g} rad/s")
    t_rec, drop_first = _record_times(duration, config, times)
    psi = np.array(psi, dtype=complex)
    states, obs = [], {}

    def record(v):
        p = {"norm": float(np.vdot(v, v).real)}
        if layout is not None:
            q = _probe(np.diag(np.abs(v) ** 2), layout, False)
            q.pop("trace", None)
            p.update(q)
        if abs(p["norm"] - 1.0) > 1e-10:
            raise StepSizeError(f"norm drift {abs(p['norm'] - 1.0):.3g}")
        if "fock_top" in p and p["fock_top"] > TOP_FOCK_TOL:
            raise TruncationError(f"top Fock level population {p['fock_top']:.3g} exceeds {TOP_FOCK_TOL:g}")
        for k, val in p.items():
            obs.setdefault(k, []).append(val)
        if config.store_states or not states:
            states.append(v.copy())
        else:
            states[-1] = v.copy()

    record(psi)
    if config.method == "rk4_fixed":
        for a, b in zip(t_rec[:-1], t_rec[1:]):
            n = max(1, int(ceil((b - a) / config.dt - 1e-9)))
            h = (b - a) / n
            for i in range(n):
                t = a + i * h
                if static:
                    m1 = m2 = m3 = m0
                else:
                    m1, m2, m3 = mat_at(t), mat_at(t + 0.5 * h), mat_at(t + h)
                k1 = m1 @ psi
                k2 = m2 @ (psi + 0.5 * h * k1)
                k3 = m2 @ (psi + 0.5 * h * k2)
                k4 = m3 @ (psi + h * k3)
                psi = psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            record(psi)
    else:
        sol = solve_ivp(lambda t, y: (m0 if static else mat_at(t)) @ y, (0.0, t_rec[-1]), psi,
                        method="RK45", t_eval=t_rec, rtol=config.rtol, atol=config.atol)
        if not sol.success:
            raise StepSizeError(f"adaptive integration failed: {sol.message}")
        for k in range(1, sol.y.shape[1]):
            record(sol.y[:, k])
    if drop_first:
        t_rec = t_rec[1:]
        states = states[1:] if config.store_states else states
        obs = {k: v[1:] for k, v in obs.items()}
    if isinstance(state, QuantumState):
        states = [QuantumState(s, layout) for s in states]
    return Trajectory(t_rec, states, {k: np.asarray(v) for k, v in obs.items()}, None, layout)


def propagator(hamiltonian, duration):
    """Exact closed-system propagator ``exp(-i H t)`` for a static Hamiltonian."""
    return expm(-1j * _as_matrix(hamiltonian) * duration)


def evolve_exact(state, hamiltonian, duration):
    """Apply :func:`propagator` to a pure state or density matrix."""
    u = propagator(hamiltonian, duration)
    data = state.data if isinstance(state, QuantumState) else np.asarray(state)
    out = u @ data if data.ndim == 1 else u @ data @ u.conj().T
    if isinstance(state, QuantumState):
        return QuantumState(out, state.layout)
    return out
