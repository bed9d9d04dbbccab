"""Derived quantities: contrast, detection models, reset error, Choi matrices, lifetimes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import exp, lgamma, log, sqrt

import numpy as np

from .errors import ConvergenceError, DegenerateBranchError, NumericalError, ZeroNormError
from .hilbert import QuantumState, psd_sqrt

SERIES_TOL = 1e-12


# ---------------------------------------------------------------------------
# detection


def contrast(p_bright, p_dark):
    """Readout contrast ``P(|alpha_1|^2) - P(|alpha_0|^2)``."""
    pb = np.asarray(p_bright, dtype=float)
    pd = np.asarray(p_dark, dtype=float)
    if np.any((pb < 0) | (pb > 1)) or np.any((pd < 0) | (pd > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    c = pb - pd
    return float(c) if c.ndim == 0 else c


def bright_probability(alpha_sq, gamma_j, gamma_r):
    """Asymptotic bright-count probability ``1 - exp(-|a|^2 g_J / (g_J + g_R))``."""
    total = gamma_j + gamma_r
    if total == 0:
        return np.zeros_like(np.asarray(alpha_sq, dtype=float)) if np.ndim(alpha_sq) else 0.0
    return -np.expm1(-np.asarray(alpha_sq, dtype=float) * gamma_j / total)


def dark_probability(gamma_d, t_m):
    return -np.expm1(-gamma_d * np.asarray(t_m, dtype=float))


def combine_detection(p_bright, p_dark):
    """``P_B + (1 - P_B) P_D``: a click from either process."""
    return p_bright + (1.0 - p_bright) * p_dark


def analytic_detection_probability(alpha_sq, gamma_j, gamma_r, gamma_d, t_m):
    """Click probability of the saturated bright model combined with dark counts.

    Parameters
    ----------
    alpha_sq : float or array_like
        Mean cavity photon number.
    gamma_j, gamma_r, gamma_d : float
        Bright tunnelling, relaxation and dark tunnelling rates (1/s).
    t_m : float or array_like
        Measurement time (s); enters only through the dark-count term.
    """
    if min(np.min(alpha_sq), gamma_j, gamma_r, gamma_d, np.min(t_m)) < 0:
        raise ValueError("inputs must be nonnegative")
    return combine_detection(bright_probability(alpha_sq, gamma_j, gamma_r), dark_probability(gamma_d, t_m))


def dephasing_factor(alpha0, alpha1):
    """Dephasing factor ``D = exp(-|alpha_1 - alpha_0|^2)``.

    ``D`` is the squared pointer overlap ``|<alpha_0|alpha_1>|^2``. The
    traced qubit coherence after the drive is ``a b^* <alpha_1|alpha_0>``,
    so its modulus is suppressed by ``sqrt(D)``.
    """
    return float(np.exp(-abs(complex(alpha1) - complex(alpha0)) ** 2))


# ---------------------------------------------------------------------------
# reset error


def upper_incomplete_gamma(N, x):
    """``Gamma(N, x)`` for integer ``N >= 1`` by upward recurrence.

    ``Gamma(1, x) = exp(-x)`` and
    ``Gamma(N, x) = (N - 1) Gamma(N - 1, x) + x^(N-1) exp(-x)``.
    """
    if int(N) != N or N < 1:
        raise ValueError("N must be an integer >= 1")
    ex = exp(-x)
    g = ex
    term = ex
    for k in range(1, int(N)):
        term *= x  # x^k e^-x
        g = k * g + term
    return g


def regularized_upper_gamma(N, x):
    """``Gamma(N, x) / Gamma(N)``, the probability of fewer than ``N`` Poisson events."""
    return upper_incomplete_gamma(N, x) / exp(lgamma(N))


def subtraction_probability(N, x):
    """``P_N = 1 - Gamma(N, x)/Gamma(N)``: norm of ``N`` subtractions on a coherent state.

    When the result is small the difference is replaced by the complementary
    Poisson sum, which avoids cancellation.
    """
    q = regularized_upper_gamma(N, x)
    if q < 0.5:
        return 1.0 - q
    # sum_{k >= N} e^-x x^k / k!
    total, k = 0.0, int(N)
    term = exp(-x + k * log(x) - lgamma(k + 1)) if x > 0 else 0.0
    while term > 0:
        total += term
        k += 1
        term *= x / k
        if term < 1e-18 * total:
            break
    return total


def _poisson_shifted_mean(x, N, tol=SERIES_TOL, max_terms=100000):
    """Mean of ``m`` under weights ``|c_{m+N}|^2 / P_N`` (coherent state, ``|alpha|^2 = x``)."""
    if x == 0:
        return 0.0
    num = den = 0.0
    for m in range(max_terms):
        w = exp(-x + (m + N) * log(x) - lgamma(m + N + 1))
        num += m * w
        den += w
        rho = x / (m + N + 1)  # w_{m+1} / w_m, decreasing in m
        if rho < 1:
            tail_w = w * rho / (1 - rho)
            tail_mw = w * (m * rho / (1 - rho) + rho / (1 - rho) ** 2)
            if tail_w < tol * den and tail_mw < tol * max(num, den):
                return num / den
    raise ConvergenceError(f"photon-number series not converged after {max_terms} terms")


def subtraction_mean_photons(x, N):
    """``|alpha_M|^2``: mean photon number after ``N`` subtractions of ``|alpha|^2 = x``."""
    return _poisson_shifted_mean(x, N)


def reset_error(alpha1, N, *, tol=SERIES_TOL, max_terms=100000):
    """Vacuum infidelity left by a displacement reset after ``N`` photon subtractions.

    The post-measurement cavity state is ``B_-^N |alpha_1>`` normalized by
    ``P_N``; the reset removes ``alpha_M``, in phase with ``alpha_1`` and with
    ``|alpha_M|^2`` the mean photon number of the subtracted state. The error
    is ``1 - |<alpha_M| B_-^N |alpha_1>|^2 / P_N``.

    Raises
    ------
    ConvergenceError
        If the overlap series tail does not drop below ``tol``.
    """
    if int(N) != N or N < 1:
        raise ValueError("N must be an integer >= 1")
    N = int(N)
    x = abs(complex(alpha1)) ** 2
    if x == 0:
        return 0.0
    xm = subtraction_mean_photons(x, N)
    p_n = subtraction_probability(N, x)
    r, rm = sqrt(x), sqrt(xm)
    if rm == 0:
        total_log = -0.5 * (x + xm) + N * log(r) - 0.5 * lgamma(N + 1)
    else:
        # terms t_m = e^{-(x + xm)/2} r^{m+N} rm^m / sqrt((m+N)! m!), all positive
        total_log = -np.inf
        for m in range(max_terms):
            lt = -0.5 * (x + xm) + (m + N) * log(r) + m * log(rm) - 0.5 * (lgamma(m + N + 1) + lgamma(m + 1))
            total_log = np.logaddexp(total_log, lt)
            ratio = r * rm / sqrt((m + N + 1) * (m + 1))
            if ratio < 1 and exp(lt - total_log) * ratio / (1 - ratio) < tol:
                break
        else:
            raise ConvergenceError(f"overlap series not converged after {max_terms} terms")
    overlap_sq = exp(2 * total_log)
    return float(min(1.0, max(0.0, 1.0 - overlap_sq / p_n)))


def subtraction_backaction(state, N, operator="subtraction"):
    """Apply the photon-subtraction back-action ``N`` times and renormalize.

    Parameters
    ----------
    state : QuantumState or ndarray
        Cavity state vector or density matrix.
    N : int
    operator : {"subtraction", "lowering"}
        ``B_- = a n^(-1/2)`` (removes exactly one quantum) or ``B = a``.

    Raises
    ------
    ZeroNormError
        If the state has no support above Fock level ``N - 1``.
    """
    data = state.data if isinstance(state, QuantumState) else np.asarray(state, dtype=complex)
    n = data.shape[0]
    if operator == "subtraction":
        b = np.diag(np.ones(n - 1), 1).astype(complex)
    elif operator == "lowering":
        b = np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)
    else:
        raise ValueError(f"unknown operator {operator!r}")
    out = data.astype(complex)
    for _ in range(int(N)):
        out = b @ out if out.ndim == 1 else b @ out @ b.conj().T
    norm = np.vdot(out, out).real if out.ndim == 1 else np.trace(out).real
    ref = np.vdot(data, data).real if data.ndim == 1 else np.trace(data).real
    if norm <= 1e-14 * ref:
        raise ZeroNormError(f"state has no support above Fock level {int(N) - 1}")
    out = out / sqrt(norm) if out.ndim == 1 else out / norm
    if isinstance(state, QuantumState):
        return QuantumState(out, state.layout)
    return out


# ---------------------------------------------------------------------------
# Choi matrices and fidelity


class ChoiMatrix:
    """4x4 Choi matrix; element ``[(i, j), (k, l)] = <j|E(|i><k|)|l>`` at row ``2i+j``."""

    def __init__(self, matrix):
        m = np.array(matrix, dtype=complex)
        if m.shape != (4, 4):
            raise ValueError("a qubit Choi matrix is 4x4")
        m.flags.writeable = False
        self.matrix = m

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    def __repr__(self):
        return f"ChoiMatrix({self.matrix!r})"

    @property
    def trace(self):
        return float(np.trace(self.matrix).real)

    def hermiticity_error(self):
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.conj().T))[0])

    def is_cp(self, tol=1e-8):
        return self.min_eigenvalue() >= -tol

    def is_tp(self, tol=1e-6):
        # partial trace over the output factor is the identity
        r = self.matrix.reshape(2, 2, 2, 2)
        return bool(np.allclose(np.einsum("ijkj->ik", r), np.eye(2), atol=tol))

    def element(self, i, j, k, l):
        return self.matrix[2 * i + j, 2 * k + l]

    def apply(self, rho):
        """``E(rho)`` reconstructed from the Choi matrix."""
        r = self.matrix.reshape(2, 2, 2, 2)
        return np.einsum("ik,ijkl->jl", np.asarray(rho), r)


def _unit(i, k):
    e = np.zeros((2, 2), dtype=complex)
    e[i, k] = 1.0
    return e


PROBE_STATES = {
    "0": np.array([1, 0], dtype=complex),
    "1": np.array([0, 1], dtype=complex),
    "+": np.array([1, 1], dtype=complex) / sqrt(2),
    "+i": np.array([1, 1j], dtype=complex) / sqrt(2),
}


def choi_from_probes(out0, out1, out_plus, out_plus_i):
    """Choi matrix from the images of ``|0>, |1>, |+>, |+i>``.

    Linearity gives ``E(|0><1|) = E(+) + i E(+i) - (1+i)/2 (E(0) + E(1))``
    and ``E(|1><0|) = E(+) - i E(+i) - (1-i)/2 (E(0) + E(1))``.
    """
    out0, out1, op, oi = (np.asarray(x, dtype=complex) for x in (out0, out1, out_plus, out_plus_i))
    s = out0 + out1
    images = {
        (0, 0): out0,
        (1, 1): out1,
        (0, 1): op + 1j * oi - 0.5 * (1 + 1j) * s,
        (1, 0): op - 1j * oi - 0.5 * (1 - 1j) * s,
    }
    c = sum(np.kron(_unit(i, k), images[(i, k)]) for (i, k) in images)
    return ChoiMatrix(c)


def choi_from_channel(channel):
    """Choi matrix of a linear qubit map by probing ``|0>, |1>, |+>, |+i>``."""
    outs = [channel(np.outer(v, v.conj())) for v in PROBE_STATES.values()]
    return choi_from_probes(*outs)


def choi_traces(channel_trace):
    """Choi matrices at every record time from ``rho -> array (T, 2, 2)``."""
    outs = [np.asarray(channel_trace(np.outer(v, v.conj()))) for v in PROBE_STATES.values()]
    return [choi_from_probes(*(o[t] for o in outs)) for t in range(len(outs[0]))]


def perfect_qnd_choi():
    """Choi matrix of perfect dephasing (ideal QND measurement)."""
    c = np.zeros((4, 4), dtype=complex)
    c[0, 0] = c[3, 3] = 1.0
    return ChoiMatrix(c)


def ideal_coherence(alpha0, alpha1):
    """``K(alpha_0, alpha_1)``: surviving qubit coherence of the ideal channel."""
    x0 = abs(complex(alpha0)) ** 2
    x1 = abs(complex(alpha1)) ** 2
    return exp(-0.5 * (x0 + x1)) + sqrt((-np.expm1(-x0)) * (-np.expm1(-x1)))


def ideal_choi(alpha0, alpha1):
    """Choi matrix of the ideal-detector channel (corner off-diagonals ``K``)."""
    k = ideal_coherence(alpha0, alpha1)
    c = np.zeros((4, 4), dtype=complex)
    c[0, 0] = c[3, 3] = 1.0
    c[0, 3] = c[3, 0] = k
    return ChoiMatrix(c)


def process_fidelity(c1, c2):
    """Uhlmann fidelity of two Choi matrices normalized by their traces.

    ``F = (Tr sqrt(sqrt(C1) C2 sqrt(C1)))^2 / (Tr C1 Tr C2)``.

    The trace is evaluated as the nuclear norm of ``sqrt(C1) sqrt(C2)``,
    which stays accurate when the matrices are rank deficient (the nested
    square root turns roundoff of order ``1e-16`` into errors of ``1e-8``).

    Raises
    ------
    NumericalError
        If either input has an eigenvalue below ``-1e-8``.
    """
    a = np.asarray(c1.matrix if isinstance(c1, ChoiMatrix) else c1, dtype=complex)
    b = np.asarray(c2.matrix if isinstance(c2, ChoiMatrix) else c2, dtype=complex)
    tr = np.linalg.svd(psd_sqrt(a) @ psd_sqrt(b), compute_uv=False).sum()
    denom = np.trace(a).real * np.trace(b).real
    if denom <= 0:
        raise NumericalError("Choi matrices must have positive trace")
    return float(min(1.0, max(0.0, tr**2 / denom)))


def analytic_ideal_fidelity(alpha0, alpha1):
    """``F = (1 + sqrt(1 - K^2)) / 2`` for the ideal-detector channel."""
    k = ideal_coherence(alpha0, alpha1)
    return 0.5 * (1.0 + sqrt(max(0.0, 1.0 - k * k)))


# ---------------------------------------------------------------------------
# conditional states


@dataclass(frozen=True)
class ConditionalStates:
    """Post-measurement qubit states of the ideal channel.

    ``p0``/``p1`` are the no-click/click probabilities. Accessing the state
    of a zero-probability branch raises :class:`DegenerateBranchError`.
    """

    p0: float
    p1: float
    _psi0: np.ndarray | None
    _psi1: np.ndarray | None

    @property
    def psi0(self):
        if self._psi0 is None:
            raise DegenerateBranchError("no-click branch has zero probability")
        return self._psi0

    @property
    def psi1(self):
        if self._psi1 is None:
            raise DegenerateBranchError("click branch has zero probability")
        return self._psi1

    @property
    def overlap(self):
        """``<psi_0|psi_1>``: nonzero because the pointer states overlap."""
        return complex(np.vdot(self.psi0, self.psi1))

    def __iter__(self):
        return iter((self.psi0, self.psi1))


def conditional_states(a, b, alpha0, alpha1, tol=1e-300):
    """Qubit states after no click (``psi_0``) and after a click (``psi_1``)."""
    a, b = complex(a), complex(b)
    if abs(abs(a) ** 2 + abs(b) ** 2 - 1) > 1e-10:
        raise ValueError("(a, b) must be normalized")
    x0 = abs(complex(alpha0)) ** 2
    x1 = abs(complex(alpha1)) ** 2
    v0 = np.array([a * exp(-x0 / 2), b * exp(-x1 / 2)])
    v1 = np.array([a * sqrt(-np.expm1(-x0)), b * sqrt(-np.expm1(-x1))])
    p0 = float(np.vdot(v0, v0).real)
    p1 = float(np.vdot(v1, v1).real)
    psi0 = v0 / sqrt(p0) if p0 > tol else None
    psi1 = v1 / sqrt(p1) if p1 > tol else None
    return ConditionalStates(p0, p1, psi0, psi1)


# ---------------------------------------------------------------------------
# lifetimes


@dataclass(frozen=True)
class LifetimeReport:
    """Cavity- and JPM-limited qubit lifetimes (s) and rates (1/s)."""

    n: int
    T1_kappa: float
    T1_gammaR: float
    Gamma_kappa: float
    Gamma_gammaR: float


def qubit_lifetimes(params, n=0):
    """Qubit lifetimes from dressing with the cavity and with the hybridized JPM.

    Cavity channel: ``Gamma = kappa(w_Q + chi_Q) g^2 / Delta^2`` with the
    Ohmic coupling ``kappa(w) = kappa w / w_C``.

    JPM channel: the qubit-excited state ``|1, n, a>`` decays into the
    hybridized cavity-JPM states ``|0, n, b>``. For ``n = 0`` the single
    final state gives ``|element|^2 = g^2 / (2 Delta^2)``; for ``n > 0`` each
    of the two final states gives ``(g^2 / 4 Delta^2)(sqrt(n+1) - sqrt(n))^2``
    and the rates add. ``gamma_R`` is Ohmic-scaled to ``gamma_R w_Q / w_J``.
    """
    if int(n) != n or n < 0:
        raise ValueError("n must be a nonnegative integer")
    n = int(n)
    g2_d2 = params.g_q**2 / params.delta**2
    if sqrt(g2_d2) > 0.1:
        warnings.warn(f"g_q / Delta = {sqrt(g2_d2):.3f} > 0.1: lowest-order dressing is inaccurate",
                      stacklevel=2)
    kappa_eff = params.kappa * (params.omega_q + params.chi_q) / params.omega_c
    gamma_k = kappa_eff * g2_d2
    gamma_r_eff = params.gamma_r * params.omega_q / params.omega_j_measure
    if n == 0:
        elem = 0.5 * g2_d2
        channels = 1
    else:
        elem = 0.25 * g2_d2 * (sqrt(n + 1) - sqrt(n)) ** 2
        channels = 2
    gamma_j = channels * gamma_r_eff * elem
    inv = lambda r: 1.0 / r if r > 0 else float("inf")  # noqa: E731
    return LifetimeReport(n, inv(gamma_k), inv(gamma_j), gamma_k, gamma_j)


def lifetime_scaling(n):
    """``T1(n) / T1(0) = (sqrt(n) + sqrt(n+1))^2`` of the JPM-limited lifetime."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    return (sqrt(n) + sqrt(n + 1)) ** 2


def qnd_deviation(probs):
    """``P00 - P0``, ``P11 - P1`` and ``P01 + P10`` of a repeated-readout result."""
    return {
        "d00": probs["P00"] - probs["P0"],
        "d11": probs["P11"] - probs["P1"],
        "flip": probs["P01"] + probs["P10"],
    }
