"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise, or when
``PERTURB_LEARN_PURE_PYTHON=1`` is set, the numpy fallback is used.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("PERTURB_LEARN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

__all__ = ["BACKEND", "prox_l0_box", "kde_logsum_grad", "gmm_logsum_grad", "pgd_step", "backend"]


def backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python' or the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def prox_l0_box(V, X, tb, lo, hi, impl=None):
    V, X = _c(np.atleast_2d(V)), _c(np.atleast_2d(X))
    tb = _c(np.broadcast_to(np.asarray(tb, dtype=np.float64), (V.shape[0],)))
    return (impl or _impl).prox_l0_box(V, X, tb, _c(lo), _c(hi))


def kde_logsum_grad(X, P, h, want_grad=True, impl=None):
    return (impl or _impl).kde_logsum_grad(_c(X), _c(P), float(h), bool(want_grad))


def gmm_logsum_grad(X, means, inv_var, log_norm, want_grad=True, impl=None):
    return (impl or _impl).gmm_logsum_grad(_c(X), _c(means), _c(inv_var), _c(log_norm),
                                           bool(want_grad))


def pgd_step(X, Xt, G, alpha, eps, linf, lo=None, hi=None, impl=None):
    """Projected step applied in place to the C-contiguous float64 array ``Xt``."""
    clamp = lo is not None and hi is not None
    d = X.shape[1]
    lo = _c(np.broadcast_to(lo, (d,))) if clamp else np.zeros(d)
    hi = _c(np.broadcast_to(hi, (d,))) if clamp else np.zeros(d)
    (impl or _impl).pgd_step(_c(X), Xt, _c(G), float(alpha), float(eps), bool(linf),
                             clamp, lo, hi)
    return Xt
