# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the p-CFE solver.

Row-wise kernels over C-contiguous float64 arrays. Semantics match
``_kernels_py`` exactly up to floating-point summation order.
"""

import numpy as np

from libc.math cimport exp, log, sqrt, INFINITY


def prox_l0_box(const double[:, ::1] V, const double[:, ::1] X,
                const double[::1] tb, const double[::1] lo, const double[::1] hi):
    cdef Py_ssize_t m = V.shape[0], d = V.shape[1], i, j
    cdef double v, x, u, keep, move, t
    out = np.empty((m, d), dtype=np.float64)
    cdef double[:, ::1] O = out
    for i in range(m):
        t = tb[i]
        for j in range(d):
            v = V[i, j]
            x = X[i, j]
            u = v
            if u < lo[j]:
                u = lo[j]
            elif u > hi[j]:
                u = hi[j]
            keep = 0.5 * (x - v) * (x - v)
            move = 0.5 * (u - v) * (u - v) + t
            if keep <= move:
                O[i, j] = x
            else:
                O[i, j] = u
    return out


def kde_logsum_grad(const double[:, ::1] X, const double[:, ::1] P, double h,
                    bint want_grad):
    """Per row: log sum_j exp(-|x - p_j|^2 / 2h^2) and sum_j w_j (p_j - x) / h^2."""
    cdef Py_ssize_t m = X.shape[0], d = X.shape[1], n = P.shape[0], i, j, k
    cdef double s, t, mx, tot, w, inv2h2 = 1.0 / (2.0 * h * h), invh2 = 1.0 / (h * h)
    logs = np.empty(m, dtype=np.float64)
    grads = np.zeros((m if want_grad else 0, d if want_grad else 0), dtype=np.float64)
    buf_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] L = logs
    cdef double[:, ::1] G = grads
    cdef double[::1] buf = buf_arr
    for i in range(m):
        mx = -INFINITY
        for j in range(n):
            s = 0.0
            for k in range(d):
                t = X[i, k] - P[j, k]
                s += t * t
            s = -s * inv2h2
            buf[j] = s
            if s > mx:
                mx = s
        tot = 0.0
        for j in range(n):
            w = exp(buf[j] - mx)
            buf[j] = w
            tot += w
        L[i] = mx + log(tot)
        if want_grad:
            for j in range(n):
                w = buf[j] / tot * invh2
                if w == 0.0:
                    continue
                for k in range(d):
                    G[i, k] += w * (P[j, k] - X[i, k])
    return logs, grads


def gmm_logsum_grad(const double[:, ::1] X, const double[:, ::1] means,
                    const double[:, ::1] inv_var, const double[::1] log_norm,
                    bint want_grad):
    """Per row: log sum_k exp(log_norm_k - 0.5 sum_j (x_j - mu_kj)^2 inv_var_kj)
    and its gradient sum_k r_k inv_var_k * (mu_k - x)."""
    cdef Py_ssize_t m = X.shape[0], d = X.shape[1], K = means.shape[0], i, j, k
    cdef double s, t, mx, tot, w
    logs = np.empty(m, dtype=np.float64)
    grads = np.zeros((m if want_grad else 0, d if want_grad else 0), dtype=np.float64)
    buf_arr = np.empty(K, dtype=np.float64)
    cdef double[::1] L = logs
    cdef double[:, ::1] G = grads
    cdef double[::1] buf = buf_arr
    for i in range(m):
        mx = -INFINITY
        for k in range(K):
            s = 0.0
            for j in range(d):
                t = X[i, j] - means[k, j]
                s += t * t * inv_var[k, j]
            s = log_norm[k] - 0.5 * s
            buf[k] = s
            if s > mx:
                mx = s
        tot = 0.0
        for k in range(K):
            w = exp(buf[k] - mx)
            buf[k] = w
            tot += w
        L[i] = mx + log(tot)
        if want_grad:
            for k in range(K):
                w = buf[k] / tot
                if w == 0.0:
                    continue
                for j in range(d):
                    G[i, j] += w * inv_var[k, j] * (means[k, j] - X[i, j])
    return logs, grads


def pgd_step(const double[:, ::1] X, double[:, ::1] Xt, const double[:, ::1] G,
             double alpha, double eps, bint linf, bint clamp,
             const double[::1] lo, const double[::1] hi):
    """One projected step, in place on ``Xt``: descend, project onto the
    eps-ball around ``X``, clip to ``[lo, hi]``."""
    cdef Py_ssize_t m = X.shape[0], d = X.shape[1], i, j
    cdef double gn, scale, nrm, f, v, g
    for i in range(m):
        if linf:
            for j in range(d):
                g = G[i, j]
                v = Xt[i, j]
                if g > 0:
                    v = v - alpha
                elif g < 0:
                    v = v + alpha
                v = v - X[i, j]
                if v > eps:
                    v = eps
                elif v < -eps:
                    v = -eps
                v = X[i, j] + v
                if clamp:
                    if v < lo[j]:
                        v = lo[j]
                    elif v > hi[j]:
                        v = hi[j]
                Xt[i, j] = v
        else:
            gn = 0.0
            for j in range(d):
                gn += G[i, j] * G[i, j]
            scale = alpha / sqrt(gn) if gn > 0 else 0.0
            nrm = 0.0
            for j in range(d):
                v = Xt[i, j] - scale * G[i, j] - X[i, j]
                Xt[i, j] = v
                nrm += v * v
            nrm = sqrt(nrm)
            f = eps / nrm if nrm > eps else 1.0
            for j in range(d):
                v = X[i, j] + Xt[i, j] * f
                if clamp:
                    if v < lo[j]:
                        v = lo[j]
                    elif v > hi[j]:
                        v = hi[j]
                Xt[i, j] = v
