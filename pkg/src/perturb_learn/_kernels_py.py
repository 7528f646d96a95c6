"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy.special import logsumexp

# upper bound on elements of the (rows, points, dim) difference tensor
_CHUNK_ELEMS = 1 << 22


def prox_l0_box(V, X, tb, lo, hi):
    U = np.clip(V, lo, hi)
    keep = 0.5 * (X - V) ** 2
    move = 0.5 * (U - V) ** 2 + tb[:, None]
    return np.where(keep <= move, X, U)


def _chunks(m, per_row):
    step = max(1, _CHUNK_ELEMS // max(per_row, 1))
    for start in range(0, m, step):
        yield slice(start, min(m, start + step))


def kde_logsum_grad(X, P, h, want_grad):
    m, d = X.shape
    logs = np.empty(m)
    grads = np.zeros((m, d) if want_grad else (0, 0))
    for sl in _chunks(m, P.shape[0] * d):
        diff = P[None, :, :] - X[sl, None, :]
        e = -np.einsum("ijk,ijk->ij", diff, diff) / (2.0 * h * h)
        lse = logsumexp(e, axis=1)
        logs[sl] = lse
        if want_grad:
            w = np.exp(e - lse[:, None]) / (h * h)
            grads[sl] = np.einsum("ij,ijk->ik", w, diff)
    return logs, grads


def gmm_logsum_grad(X, means, inv_var, log_norm, want_grad):
    m, d = X.shape
    K = means.shape[0]
    e = np.empty((m, K))
    for k in range(K):
        diff = X - means[k]
        e[:, k] = log_norm[k] - 0.5 * (diff * diff) @ inv_var[k]
    lse = logsumexp(e, axis=1)
    grads = np.zeros((m, d) if want_grad else (0, 0))
    if want_grad:
        r = np.exp(e - lse[:, None])
        for k in range(K):
            grads += r[:, k:k + 1] * (inv_var[k] * (means[k] - X))
    return lse, grads


def pgd_step(X, Xt, G, alpha, eps, linf, clamp, lo, hi):
    if linf:
        D = np.clip(Xt - alpha * np.sign(G) - X, -eps, eps)
    else:
        gn = np.sqrt(np.einsum("ij,ij->i", G, G))
        scale = np.divide(alpha, gn, out=np.zeros_like(gn), where=gn > 0)
        D = Xt - scale[:, None] * G - X
        nrm = np.sqrt(np.einsum("ij,ij->i", D, D))
        f = np.ones_like(nrm)
        np.divide(eps, nrm, out=f, where=nrm > eps)
        D *= f[:, None]
    out = X + D
    if clamp:
        np.clip(out, lo, hi, out=out)
    Xt[...] = out
