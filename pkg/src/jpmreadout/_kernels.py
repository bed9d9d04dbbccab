"""Compiled RK4 kernel for the master equation.

Handles the common case: ``M = -i H_eff`` in CSR form plus jump operators
that are a single matrix unit ``|x><y|`` on one tensor factor. The
numpy right-hand side in :mod:`jpmreadout.evolve` is the
reference implementation; tests check the two agree.
"""

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _rhs(rho, out, tmp, tmp2, indptr, indices, data, indptr_r, indices_r, data_r, hermitian, jumps):
    d = rho.shape[0]
    # tmp = M_L @ rho
    for i in range(d):
        for j in range(d):
            tmp[i, j] = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            c = indices[k]
            v = data[k]
            for j in range(d):
                tmp[i, j] += v * rho[c, j]
    if hermitian:
        for i in range(d):
            for j in range(d):
                out[i, j] = tmp[i, j] + np.conj(tmp[j, i])
    else:
        # tmp2 = M_R @ rho^+
        for i in range(d):
            for j in range(d):
                tmp2[i, j] = 0.0
            for k in range(indptr_r[i], indptr_r[i + 1]):
                c = indices_r[k]
                v = data_r[k]
                for j in range(d):
                    tmp2[i, j] += v * np.conj(rho[j, c])
        for i in range(d):
            for j in range(d):
                out[i, j] = tmp[i, j] + np.conj(tmp2[j, i])
    # jumps: rows of ``jumps`` are (coef, x, y, before, dsub, after)
    for q in range(jumps.shape[0]):
        coef = jumps[q, 0]
        x = int(jumps[q, 1])
        y = int(jumps[q, 2])
        before = int(jumps[q, 3])
        ds = int(jumps[q, 4])
        after = int(jumps[q, 5])
        for b1 in range(before):
            for a1 in range(after):
                r_out = (b1 * ds + x) * after + a1
                r_in = (b1 * ds + y) * after + a1
                for b2 in range(before):
                    for a2 in range(after):
                        c_out = (b2 * ds + x) * after + a2
                        c_in = (b2 * ds + y) * after + a2
                        out[r_out, c_out] += coef * rho[r_in, c_in]


def _rk4(rho, n, h, indptr, indices, data, indptr_r, indices_r, data_r, hermitian, jumps,
         hermitize_every, counter0):
    d = rho.shape[0]
    k1 = np.empty_like(rho)
    k2 = np.empty_like(rho)
    k3 = np.empty_like(rho)
    k4 = np.empty_like(rho)
    y = np.empty_like(rho)
    tmp = np.empty_like(rho)
    tmp2 = np.empty_like(rho)
    args = (indptr, indices, data, indptr_r, indices_r, data_r, hermitian, jumps)
    counter = counter0
    for _ in range(n):
        _rhs(rho, k1, tmp, tmp2, *args)
        for i in range(d):
            for j in range(d):
                y[i, j] = rho[i, j] + 0.5 * h * k1[i, j]
        _rhs(y, k2, tmp, tmp2, *args)
        for i in range(d):
            for j in range(d):
                y[i, j] = rho[i, j] + 0.5 * h * k2[i, j]
        _rhs(y, k3, tmp, tmp2, *args)
        for i in range(d):
            for j in range(d):
                y[i, j] = rho[i, j] + h * k3[i, j]
        _rhs(y, k4, tmp, tmp2, *args)
        for i in range(d):
            for j in range(d):
                rho[i, j] += (h / 6.0) * ((k1[i, j] + k4[i, j]) + 2.0 * (k2[i, j] + k3[i, j]))
        counter += 1
        if hermitian and hermitize_every > 0 and counter % hermitize_every == 0:
            for i in range(d):
                for j in range(i, d):
                    v = 0.5 * (rho[i, j] + np.conj(rho[j, i]))
                    rho[i, j] = v
                    rho[j, i] = np.conj(v)
    return counter


if HAVE_NUMBA:
    _rhs = numba.njit(cache=True, fastmath=False)(_rhs)
    rk4_steps = numba.njit(cache=True, fastmath=False)(_rk4)
else:  # pragma: no cover
    rk4_steps = None
