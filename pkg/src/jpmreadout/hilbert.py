"""Truncated operator algebra for the cavity, qubit and JPM.

The composite space is always ordered cavity (x) qubit (x) JPM. The qubit and
the JPM are optional so that the same machinery serves the drive stage
(cavity and qubit only), single-branch detection runs (cavity and JPM) and
the full three-body measurement stage.

Conventions
-----------
* Qubit basis ``|0>, |1>`` with ``|1>`` the excited state, so that
  ``sigma_z = diag(1, -1)`` and ``sigma_+ = |1><0|``.
* JPM basis ``|g>, |e>, |m>`` (ground, excited, measured/voltage state), with
  ``sigma_z^J = diag(1, -1, E)`` and ``sigma_J^+ = |e><g|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NumericalError, TruncationError

SUBSYSTEMS = ("cavity", "qubit", "jpm")
QUBIT_DIM = 2
JPM_DIM = 3

# JPM level indices
G, E, M = 0, 1, 2

LEAKAGE_TOL = 1e-8


def fock_cutoff(alpha_max):
    """Default Fock truncation for coherent amplitudes up to ``|alpha_max|``."""
    a = abs(alpha_max)
    return int(ceil(a**2 + 6 * a + 10))


def _readonly(arr):
    arr = np.array(arr, dtype=complex)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HilbertLayout:
    """Subsystem structure of a composite space.

    Parameters
    ----------
    n_fock : int
        Cavity truncation dimension (number of Fock levels kept).
    include_qubit, include_jpm : bool
        Whether the two-level qubit and three-level JPM factors are present.
    """

    n_fock: int
    include_qubit: bool = True
    include_jpm: bool = True

    def __post_init__(self):
        if int(self.n_fock) != self.n_fock or self.n_fock < 1:
            raise ValueError(f"n_fock must be a positive integer, got {self.n_fock!r}")
        object.__setattr__(self, "n_fock", int(self.n_fock))

    @property
    def subsystems(self):
        names = ["cavity"]
        if self.include_qubit:
            names.append("qubit")
        if self.include_jpm:
            names.append("jpm")
        return tuple(names)

    @property
    def dims(self):
        sizes = {"cavity": self.n_fock, "qubit": QUBIT_DIM, "jpm": JPM_DIM}
        return tuple(sizes[s] for s in self.subsystems)

    @property
    def dim(self):
        return int(np.prod(self.dims))

    def has(self, subsystem):
        return subsystem in self.subsystems

    def index(self, subsystem):
        if subsystem not in SUBSYSTEMS:
            raise ValueError(f"unknown subsystem {subsystem!r}")
        try:
            return self.subsystems.index(subsystem)
        except ValueError:
            raise DimensionMismatch(f"layout {self} has no {subsystem} factor") from None

    def subsystem_dim(self, subsystem):
        return self.dims[self.index(subsystem)]

    def with_jpm(self, include=True):
        return HilbertLayout(self.n_fock, self.include_qubit, include)

    def with_qubit(self, include=True):
        return HilbertLayout(self.n_fock, include, self.include_jpm)


@dataclass(frozen=True, eq=False)
class Operator:
    """Dense operator on a :class:`HilbertLayout`.

    ``local`` optionally records ``(subsystem, local_matrix)`` when the operator
    was produced by :func:`embed`; integrators use it to apply jump operators
    without a full matrix product.
    """

    matrix: np.ndarray
    layout: HilbertLayout
    local: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        mat = _readonly(self.matrix)
        if mat.shape != (self.layout.dim, self.layout.dim):
            raise DimensionMismatch(
                f"matrix shape {mat.shape} does not match layout dimension {self.layout.dim}"
            )
        object.__setattr__(self, "matrix", mat)

    @property
    def shape(self):
        return self.matrix.shape

    def dag(self):
        local = None
        if self.local is not None:
            local = (self.local[0], self.local[1].conj().T)
        return Operator(self.matrix.conj().T, self.layout, local)

    def hermiticity_error(self):
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T), initial=0.0))

    def is_hermitian(self, tol=1e-12):
        return self.hermiticity_error() <= tol

    def _check(self, other):
        if other.layout != self.layout:
            raise DimensionMismatch(f"layouts differ: {self.layout} vs {other.layout}")

    def __add__(self, other):
        self._check(other)
        return Operator(self.matrix + other.matrix, self.layout)

    def __sub__(self, other):
        self._check(other)
        return Operator(self.matrix - other.matrix, self.layout)

    def __mul__(self, scalar):
        local = None
        if self.local is not None:
            local = (self.local[0], scalar * self.local[1])
        return Operator(scalar * self.matrix, self.layout, local)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.matrix @ other.matrix, self.layout)
        return self.matrix @ np.asarray(other)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


@dataclass(frozen=True, eq=False)
class QuantumState:
    """Pure state vector or density matrix on a layout."""

    data: np.ndarray
    layout: HilbertLayout

    def __post_init__(self):
        data = _readonly(self.data)
        d = self.layout.dim
        if data.shape not in ((d,), (d, d)):
            raise DimensionMismatch(f"state shape {data.shape} incompatible with dimension {d}")
        object.__setattr__(self, "data", data)

    @property
    def is_pure(self):
        return self.data.ndim == 1

    def density_matrix(self):
        if self.is_pure:
            return np.outer(self.data, self.data.conj())
        return np.array(self.data)

    def to_density(self):
        return self if not self.is_pure else QuantumState(self.density_matrix(), self.layout)

    def norm_error(self):
        if self.is_pure:
            return abs(np.vdot(self.data, self.data).real - 1.0)
        return abs(np.trace(self.data).real - 1.0)

    def validate(self, tol_norm=1e-10, tol_herm=1e-10, tol_trace=1e-8, tol_eig=1e-8):
        """Raise ``ValueError`` unless the state is a physical state."""
        if self.is_pure:
            if self.norm_error() > tol_norm:
                raise ValueError(f"state vector not normalized (error {self.norm_error():.3g})")
            return self
        rho = self.data
        herm = np.max(np.abs(rho - rho.conj().T))
        if herm > tol_herm:
            raise ValueError(f"density matrix not Hermitian (error {herm:.3g})")
        if self.norm_error() > tol_trace:
            raise ValueError(f"density matrix trace error {self.norm_error():.3g}")
        mineig = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min()
        if mineig < -tol_eig:
            raise ValueError(f"density matrix has negative eigenvalue {mineig:.3g}")
        return self

    def expect(self, op):
        mat = op.matrix if isinstance(op, Operator) else np.asarray(op)
        if self.is_pure:
            return complex(np.vdot(self.data, mat @ self.data))
        return complex(np.trace(mat @ self.data))

    def ptrace(self, keep):
        """Reduced density matrix on the subsystems named in ``keep`` (layout order)."""
        if isinstance(keep, str):
            keep = (keep,)
        return partial_trace(self.density_matrix(), self.layout, keep)


def partial_trace(rho, layout, keep):
    dims = layout.dims
    idx = sorted(layout.index(s) for s in keep)
    n = len(dims)
    rho = np.asarray(rho).reshape(dims + dims)
    # trace out from the highest index down so axis numbering stays valid
    for ax in reversed(range(n)):
        if ax in idx:
            continue
        cur = rho.ndim // 2
        rho = np.trace(rho, axis1=ax, axis2=ax + cur)
    d = int(np.prod([dims[i] for i in idx]))
    return rho.reshape(d, d)


def state_fidelity(a, b):
    """Fidelity between two states, ``|<a|b>|^2`` for pure inputs.

    Accepts :class:`QuantumState` or raw vectors/density matrices.
    """
    a = a.data if isinstance(a, QuantumState) else np.asarray(a)
    b = b.data if isinstance(b, QuantumState) else np.asarray(b)
    if a.ndim == 1 and b.ndim == 1:
        return float(abs(np.vdot(a, b)) ** 2)
    if a.ndim == 1:
        return float(np.vdot(a, b @ a).real)
    if b.ndim == 1:
        return float(np.vdot(b, a @ b).real)
    sa = psd_sqrt(a)
    return float(np.real(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(sa @ b @ sa), 0, None)))) ** 2)


def psd_sqrt(mat, neg_tol=1e-8):
    """Square root of a positive semidefinite matrix.

    Eigenvalues in ``[-neg_tol, 0)`` are clamped to zero, as are positive
    ones at the roundoff floor ``dim * eps * max|w|``, whose square roots
    would otherwise be of order ``1e-8``.
    """
    mat = 0.5 * (mat + mat.conj().T)
    w, v = np.linalg.eigh(mat)
    if w.min(initial=0.0) < -neg_tol:
        raise NumericalError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    floor = len(w) * np.finfo(float).eps * np.abs(w).max(initial=0.0)
    w = np.where(w > floor, w, 0.0)
    return (v * np.sqrt(w)) @ v.conj().T


# ---------------------------------------------------------------------------
# local operators


def basis(dim, k):
    v = np.zeros(dim, dtype=complex)
    v[k] = 1.0
    return v


def destroy(n_fock):
    return np.diag(np.sqrt(np.arange(1, n_fock, dtype=float)), 1).astype(complex)


def create(n_fock):
    return destroy(n_fock).T.copy()


def number(n_fock):
    return np.diag(np.arange(n_fock, dtype=float)).astype(complex)


def sigma_z():
    return np.diag([1.0, -1.0]).astype(complex)


def sigma_plus():
    """Qubit raising operator ``|1><0|``."""
    s = np.zeros((2, 2), dtype=complex)
    s[1, 0] = 1.0
    return s


def sigma_minus():
    return sigma_plus().T.copy()


def jpm_sigma_z(measured_energy=0.0):
    return np.diag([1.0, -1.0, measured_energy]).astype(complex)


def jpm_sigma_plus():
    """``|e><g|``; the measured level is not coupled coherently."""
    s = np.zeros((3, 3), dtype=complex)
    s[E, G] = 1.0
    return s


def jpm_sigma_minus():
    return jpm_sigma_plus().T.copy()


def jpm_transition(to, frm):
    """``|to><frm|`` on the JPM."""
    s = np.zeros((3, 3), dtype=complex)
    s[to, frm] = 1.0
    return s


def embed(local_op, subsystem, layout):
    """Lift a single-subsystem operator to ``layout`` (identity elsewhere).

    Raises
    ------
    DimensionMismatch
        If the local dimension does not match the subsystem in ``layout``.
    """
    mat = local_op.matrix if isinstance(local_op, Operator) else np.asarray(local_op, dtype=complex)
    pos = layout.index(subsystem)
    d = layout.dims[pos]
    if mat.shape != (d, d):
        raise DimensionMismatch(f"{subsystem} operator has shape {mat.shape}, layout expects {(d, d)}")
    left = int(np.prod(layout.dims[:pos]))
    right = int(np.prod(layout.dims[pos + 1 :]))
    full = np.kron(np.kron(np.eye(left), mat), np.eye(right))
    return Operator(full, layout, local=(subsystem, np.array(mat)))


def identity(layout):
    return Operator(np.eye(layout.dim), layout)


# ---------------------------------------------------------------------------
# coherent states and displacements


def coherent_amplitudes(alpha, n_fock):
    """Truncated, renormalized Fock amplitudes of ``|alpha>``.

    Raises :class:`TruncationError` if more than ``1e-8`` of the norm lies
    above ``n_fock - 1``.
    """
    alpha = complex(alpha)
    c = np.empty(n_fock, dtype=complex)
    c[0] = np.exp(-0.5 * abs(alpha) ** 2)
    for n in range(1, n_fock):
        c[n] = c[n - 1] * alpha / np.sqrt(n)
    leakage = 1.0 - float(np.sum(np.abs(c) ** 2))
    if leakage > LEAKAGE_TOL:
        raise TruncationError(
            f"coherent state alpha={alpha:.4g} leaks {leakage:.3g} beyond n_fock={n_fock}"
            f" (use at least {fock_cutoff(alpha)})"
        )
    return c / np.linalg.norm(c)


def coherent_state(alpha, n_fock):
    """Cavity-only coherent state ``|alpha>`` as a pure :class:`QuantumState`."""
    return QuantumState(coherent_amplitudes(alpha, n_fock), HilbertLayout(n_fock, False, False))


def displacement_matrix(beta, n_fock):
    beta = complex(beta)
    if beta == 0:
        return np.eye(n_fock, dtype=complex)
    # build in a padded space so the kept block is free of truncation artefacts
    big = n_fock + fock_cutoff(beta) + 20
    a = destroy(big)
    gen = beta * a.conj().T - np.conj(beta) * a
    return scipy.linalg.expm(gen)[:n_fock, :n_fock]


def displacement(beta, n_fock):
    """Displacement operator ``D(beta) = exp(beta a^+ - beta^* a)`` on the cavity."""
    coherent_amplitudes(beta, n_fock)  # truncation adequacy check
    return Operator(displacement_matrix(beta, n_fock), HilbertLayout(n_fock, False, False))


def product_state(layout, cavity=None, qubit=None, jpm=None):
    """Tensor product of local state vectors (defaults: vacuum, ``|0>``, ``|g>``)."""
    parts = []
    for name in layout.subsystems:
        d = layout.subsystem_dim(name)
        local = {"cavity": cavity, "qubit": qubit, "jpm": jpm}[name]
        if local is None:
            local = basis(d, 0)
        elif isinstance(local, QuantumState):
            local = local.data
        local = np.asarray(local, dtype=complex)
        if local.shape != (d,):
            raise DimensionMismatch(f"{name} state has shape {local.shape}, expected ({d},)")
        parts.append(local)
    vec = parts[0]
    for p in parts[1:]:
        vec = np.kron(vec, p)
    return QuantumState(vec, layout)


def attach(rho, layout, subsystem, local_rho):
    """Append a factor (qubit or JPM) to a state given as a density matrix.

    ``rho`` lives on ``layout`` which must lack ``subsystem``; the factor is
    inserted at its canonical position.
    """
    local_rho = np.asarray(local_rho, dtype=complex)
    if local_rho.ndim == 1:
        local_rho = np.outer(local_rho, local_rho.conj())
    new = HilbertLayout(
        layout.n_fock,
        layout.include_qubit or subsystem == "qubit",
        layout.include_jpm or subsystem == "jpm",
    )
    if new == layout:
        raise DimensionMismatch(f"layout already contains {subsystem}")
    pos = new.index(subsystem)
    dims_old = layout.dims
    left = int(np.prod(dims_old[:pos]))
    right = int(np.prod(dims_old[pos:]))
    d = local_rho.shape[0]
    r = np.asarray(rho).reshape(left, right, left, right)
    out = np.einsum("abcd,xy->axbcyd", r, local_rho).reshape(new.dim, new.dim)
    return out, new
