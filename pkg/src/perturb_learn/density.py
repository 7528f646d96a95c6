"""Class-conditional density estimators (Gaussian KDE, diagonal GMM) with
analytic input gradients."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .numerics import DTYPE, new_rng

__all__ = [
    "DensityEstimator",
    "GMMDegenerateError",
    "COV_FLOOR",
    "silverman_bandwidth",
    "fit_kde",
    "fit_gmm",
    "log_density",
    "density",
    "grad_log_density",
    "grad_density",
    "log_density_and_grad",
    "save_estimator",
    "load_estimator",
]

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6
ESTIMATOR_VERSION = 1


class GMMDegenerateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassKDE:
    points: np.ndarray
    h: float


@dataclass(frozen=True)
class ClassGMM:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    trace: tuple = ()

    @property
    def inv_var(self):
        return 1.0 / self.variances

    @property
    def log_norm(self):
        return np.log(self.weights) - 0.5 * np.sum(np.log(2.0 * np.pi * self.variances), axis=1)


@dataclass(frozen=True)
class DensityEstimator:
    kind: str
    d: int
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("kde", "gmm"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")

    @property
    def classes(self):
        return tuple(sorted(self.components))

    def component(self, c):
        key = int(c)
        if key not in self.components:
            raise KeyError(f"estimator has no class {key}; known: {self.classes}")
        return self.components[key]


def silverman_bandwidth(X) -> float:
    """``sigma_hat * n^(-1/(d+4))`` with sigma_hat the mean per-coordinate std."""
    n, d = X.shape
    sigma = float(np.mean(X.std(axis=0))) if n > 1 else 1.0
    if not sigma > 0:
        sigma = 1.0
    return sigma * n ** (-1.0 / (d + 4))


def _by_class(data):
    X = np.asarray(data.X, dtype=DTYPE)
    y = np.asarray(data.y)
    return X, y, np.unique(y)


def fit_kde(data, h=None, classes=None) -> DensityEstimator:
    """Store class-partitioned training points; ``h=None`` uses the per-class
    Silverman-style rule."""
    X, y, present = _by_class(data)
    wanted = present if classes is None else np.asarray(classes)
    comps = {}
    for c in wanted:
        pts = X[y == c]
        if pts.shape[0] == 0:
            raise ValueError(f"class {c} has no samples")
        hc = silverman_bandwidth(pts) if h is None else float(h)
        if not hc > 0:
            raise ValueError("bandwidth must be positive")
        comps[int(c)] = ClassKDE(np.ascontiguousarray(pts), hc)
    return DensityEstimator("kde", X.shape[1], comps)


def _kmeanspp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _estep(X, weights, means, variances):
    K = means.shape[0]
    e = np.empty((X.shape[0], K))
    lognorm = np.log(weights) - 0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)
    for k in range(K):
        diff = X - means[k]
        e[:, k] = lognorm[k] - 0.5 * (diff * diff) @ (1.0 / variances[k])
    lse = logsumexp(e, axis=1)
    return float(lse.sum()), np.exp(e - lse[:, None])


def _em_class(X, K, max_iter, tol, rng, max_retries):
    n, d = X.shape
    if n < K:
        raise ValueError(f"need at least K={K} samples per class, got {n}")
    means = _kmeanspp(X, K, rng)
    variances = np.tile(np.maximum(X.var(axis=0), COV_FLOOR), (K, 1))
    weights = np.full(K, 1.0 / K)
    retries = 0
    trace = []
    for _ in range(max_iter + 1):
        ll, resp = _estep(X, weights, means, variances)
        trace.append(ll)
        nk = resp.sum(axis=0)
        dead = nk < 1e-10 * n
        if np.any(dead):
            retries += 1
            if retries > max_retries:
                raise GMMDegenerateError(
                    f"component(s) {np.flatnonzero(dead).tolist()} collapsed after "
                    f"{max_retries} re-seeds")
            log.info("re-seeding degenerate GMM components %s", np.flatnonzero(dead))
            for k in np.flatnonzero(dead):
                means[k] = X[rng.integers(n)]
                variances[k] = np.maximum(X.var(axis=0), COV_FLOOR)
            weights = np.full(K, 1.0 / K)
            trace = []
            continue
        if len(trace) > 1 and trace[-1] - trace[-2] <= tol * abs(trace[-2]):
            break
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        for k in range(K):
            diff = X - means[k]
            variances[k] = np.maximum((resp[:, k] @ (diff * diff)) / nk[k], COV_FLOOR)
    return ClassGMM(weights, means, variances, tuple(trace))


def fit_gmm(data, K: int = 1, max_iter: int = 100, tol: float = 1e-10, seed: int = 0,
            max_retries: int = 5, classes=None) -> DensityEstimator:
    """Per-class diagonal-covariance GMM fitted by EM (k-means++ initialisation).

    Each class component keeps its log-likelihood trace in ``.trace``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    X, y, present = _by_class(data)
    wanted = present if classes is None else np.asarray(classes)
    rng = new_rng(seed)
    comps = {}
    for c in wanted:
        pts = X[y == c]
        if pts.shape[0] == 0:
            raise ValueError(f"class {c} has no samples")
        comps[int(c)] = _em_class(pts, K, max_iter, tol, rng, max_retries)
    return DensityEstimator("gmm", X.shape[1], comps)


def log_density_and_grad(est: DensityEstimator, X, c, want_grad=True, impl=None):
    """Batched ``log q(x, c)`` and ``grad_x log q(x, c)`` for rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    if X.shape[1] != est.d:
        raise ValueError(f"input dimension {X.shape[1]} != estimator dimension {est.d}")
    comp = est.component(c)
    if est.kind == "kde":
        n = comp.points.shape[0]
        lse, g = kernels.kde_logsum_grad(X, comp.points, comp.h, want_grad, impl=impl)
        const = -np.log(n) - 0.5 * est.d * np.log(2.0 * np.pi * comp.h ** 2)
        return lse + const, g
    return kernels.gmm_logsum_grad(X, comp.means, comp.inv_var, comp.log_norm,
                                   want_grad, impl=impl)


def _squeeze(x, val):
    return val[0] if np.ndim(x) == 1 else val


def log_density(est, x, c):
    return _squeeze(x, log_density_and_grad(est, x, c, want_grad=False)[0])


def density(est, x, c):
    """Raw density ``q(x, c)``; may underflow to 0 in high dimension."""
    return np.exp(log_density(est, x, c))


def grad_log_density(est, x, c):
    return _squeeze(x, log_density_and_grad(est, x, c)[1])


def grad_density(est, x, c):
    lq, g = log_density_and_grad(est, x, c)
    return _squeeze(x, np.exp(lq)[:, None] * g)


def save_estimator(est: DensityEstimator, path) -> None:
    meta = {"format": "perturb_learn.density", "version": ESTIMATOR_VERSION,
            "kind": est.kind, "d": est.d, "classes": list(est.classes), "h": {}, "trace": {}}
    arrays = {}
    for c in est.classes:
        comp = est.components[c]
        if est.kind == "kde":
            arrays[f"points_{c}"] = comp.points
            meta["h"][str(c)] = comp.h
        else:
            arrays[f"weights_{c}"] = comp.weights
            arrays[f"means_{c}"] = comp.means
            arrays[f"variances_{c}"] = comp.variances
            meta["trace"][str(c)] = list(comp.trace)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_estimator(path) -> DensityEstimator:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "perturb_learn.density":
            raise ValueError(f"{path} is not a density estimator file")
        if meta["version"] != ESTIMATOR_VERSION:
            raise ValueError(f"unsupported estimator version {meta['version']}")
        comps = {}
        for c in meta["classes"]:
            if meta["kind"] == "kde":
                comps[c] = ClassKDE(z[f"points_{c}"], meta["h"][str(c)])
            else:
                comps[c] = ClassGMM(z[f"weights_{c}"], z[f"means_{c}"], z[f"variances_{c}"],
                                    tuple(meta["trace"][str(c)]))
    return DensityEstimator(meta["kind"], meta["d"], comps)
