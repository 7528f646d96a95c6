"""Perturbation generators.

Every generator works on one sample (1-D ``x``, scalar target) or on a batch
(2-D ``X``, one target per row). Rows never interact: step sizes, momentum and
line searches are tracked per row, so a row's result does not depend on which
other rows share its batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .density import log_density_and_grad
from .model import grad_input, loss, predict
from .numerics import DTYPE

__all__ = [
    "PgdSpec",
    "CfeSpec",
    "PcfeSpec",
    "NoiseSpec",
    "PerturbationError",
    "BoxError",
    "PcfeResult",
    "project",
    "pgd_targeted",
    "cfe_l2",
    "prox_l0_box",
    "pcfe_objective",
    "pcfe_l0",
    "tune_beta_for_ratio",
    "noise_baseline",
    "perturbation_sizes",
    "save_perturbed",
    "load_perturbed",
    "spec_from_dict",
]


class PerturbationError(FloatingPointError):
    pass


class BoxError(ValueError):
    pass


def _resolve_iters(iterations, per_dim, d):
    if per_dim:
        return max(1, int(round(per_dim * d)))
    return int(iterations)


@dataclass(frozen=True)
class PgdSpec:
    norm: str = "l2"
    eps: float = 0.5
    steps: int = 100
    step_size: float | None = None
    clamp: bool = True
    kind: str = field(default="pgd", init=False)

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"PGD norm must be l2 or linf, got {self.norm!r}")
        if self.eps < 0 or self.steps < 0:
            raise ValueError("eps and steps must be non-negative")

    @property
    def alpha(self):
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / max(self.steps, 1)


@dataclass(frozen=True)
class CfeSpec:
    lam: float = 0.001
    lr: float = 0.01
    iterations: int = 100
    iters_per_dim: float | None = None
    kind: str = field(default="cfe", init=False)

    def __post_init__(self):
        if self.lam < 0 or self.iterations < 0 or not self.lr > 0:
            raise ValueError("need lam >= 0, iterations >= 0, lr > 0")


@dataclass(frozen=True)
class PcfeSpec:
    gamma: float = 1.0
    tau: float = 0.0
    beta: float = 0.01
    L: float = 1.0
    ls_steps: int = 5
    iterations: int = 100
    iters_per_dim: float | None = None
    log_density: bool = False
    box: float | None = None  # symmetric [-A, A] on every coordinate; None = data range
    target_ratio: float | None = None
    kind: str = field(default="pcfe", init=False)

    def __post_init__(self):
        if min(self.gamma, self.tau, self.beta) < 0:
            raise ValueError("gamma, tau, beta must be non-negative")
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.ls_steps < 0 or self.iterations < 0:
            raise ValueError("ls_steps and iterations must be non-negative")
        if self.target_ratio is not None and not 0 < self.target_ratio <= 1:
            raise ValueError("target_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    norm: str = "l2"
    magnitude: float = 0.5
    seed: int = 0
    kind: str = field(default="noise", init=False)

    def __post_init__(self):
        if self.norm not in ("l2", "linf", "l0"):
            raise ValueError(f"noise norm must be l2, linf or l0, got {self.norm!r}")
        if self.magnitude < 0:
            raise ValueError("noise magnitude must be non-negative")


_SPECS = {"pgd": PgdSpec, "cfe": CfeSpec, "pcfe": PcfeSpec, "noise": NoiseSpec}


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    return _SPECS[kind](**d)


def _batch(x, y):
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    X = x[None, :] if single else x
    Y = np.atleast_1d(np.asarray(y))
    if Y.shape[0] != X.shape[0]:
        if Y.shape[0] == 1:
            Y = np.repeat(Y, X.shape[0])
        else:
            raise ValueError("one target label per row required")
    return X, Y, single


def _out(single, X):
    return X[0] if single else X


def project(delta, eps, norm):
    """Project perturbation rows onto the l2 or linf ball of radius ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    delta = np.asarray(delta, dtype=DTYPE)
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    if norm != "l2":
        raise ValueError(f"unsupported projection norm {norm!r}")
    D = np.atleast_2d(delta)
    nrm = np.sqrt(np.einsum("ij,ij->i", D, D))
    over = nrm > eps
    if not np.any(over):
        return delta
    out = D.copy()
    out[over] = D[over] * (eps / nrm[over])[:, None]
    return out[0] if delta.ndim == 1 else out


def _finite_grad(G, what):
    if not np.all(np.isfinite(G)):
        raise PerturbationError(f"non-finite gradient in {what}")
    return G


def pgd_targeted(model, x, target, spec: PgdSpec, lo=None, hi=None, impl=None):
    """Targeted PGD: descend the loss of ``target`` inside the eps-ball.

    linf steps follow the gradient sign, l2 steps the normalised gradient.
    With ``spec.clamp`` and a feature range given, iterates are clipped to
    ``[lo, hi]`` after projection.
    """
    X, Y, single = _batch(x, target)
    X = np.ascontiguousarray(X)
    Xt = X.copy()
    if spec.eps == 0 or spec.steps == 0:
        return _out(single, Xt)
    alpha = spec.alpha
    clamp = spec.clamp and lo is not None and hi is not None
    for _ in range(spec.steps):
        G = _finite_grad(grad_input(model, Xt, Y), "PGD")
        kernels.pgd_step(X, Xt, G, alpha, spec.eps, spec.norm == "linf",
                         lo if clamp else None, hi if clamp else None, impl=impl)
    return _out(single, Xt)


def cfe_l2(model, x, target, spec: CfeSpec):
    """Wachter-style counterfactual: Adam on ``L(x', target) + lam |x' - x|^2``."""
    X, Y, single = _batch(x, target)
    iters = _resolve_iters(spec.iterations, spec.iters_per_dim, X.shape[1])
    Xc = X.copy()
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, iters + 1):
        G = grad_input(model, Xc, Y) + 2.0 * spec.lam * (Xc - X)
        _finite_grad(G, "CFE")
        m = b1 * m + (1 - b1) * G
        v = b2 * v + (1 - b2) * G * G
        Xc = Xc - spec.lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    if iters and not np.all(np.isfinite(loss(model, Xc, Y))):
        raise PerturbationError("non-finite CFE objective")
    return _out(single, Xc)


def box_bounds(spec: PcfeSpec, d, lo=None, hi=None):
    if spec.box is not None:
        A = np.broadcast_to(np.abs(np.asarray(spec.box, dtype=DTYPE)), (d,))
        return -A.copy(), A.copy()
    if lo is None or hi is None:
        raise BoxError("no box given: set spec.box or pass the data range")
    return (np.broadcast_to(np.asarray(lo, dtype=DTYPE), (d,)).copy(),
            np.broadcast_to(np.asarray(hi, dtype=DTYPE), (d,)).copy())


def _check_inside(X, lo, hi):
    if np.any(lo > hi):
        raise BoxError("box has lower > upper bound")
    if np.any(X < lo) or np.any(X > hi):
        raise BoxError("input lies outside the box")


def prox_l0_box(v, x, tb, lo, hi, impl=None):
    """Exact prox of ``tb * |u - x|_0`` plus the box indicator.

    Per coordinate the minimiser is either ``x_i`` or ``clip(v_i)``; ties keep
    ``x_i``, which is copied through unchanged. ``tb`` may be a scalar or one
    value per row.
    """
    v = np.asarray(v, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    lo = np.broadcast_to(np.asarray(lo, dtype=DTYPE), x.shape[-1:])
    hi = np.broadcast_to(np.asarray(hi, dtype=DTYPE), x.shape[-1:])
    _check_inside(x, lo, hi)
    if np.any(np.asarray(tb) < 0):
        raise ValueError("prox weight must be non-negative")
    out = kernels.prox_l0_box(v, x, tb, lo, hi, impl=impl)
    return out[0] if v.ndim == 1 else out


class _Smooth:
    """Smooth part ``|x'-x|^2 + gamma L(x', y) - tau q(x', y)`` for a batch."""

    def __init__(self, model, est, X, Y, spec):
        self.model, self.est, self.X, self.Y, self.spec = model, est, X, Y, spec
        self.classes = np.unique(Y) if est is not None and spec.tau else ()

    def _density(self, Xp, rows, want_grad):
        val = np.zeros(len(rows))
        grad = np.zeros((len(rows), Xp.shape[1])) if want_grad else None
        Ys = self.Y[rows]
        for c in self.classes:
            sel = Ys == c
            if not np.any(sel):
                continue
            lq, g = log_density_and_grad(self.est, Xp[sel], c, want_grad)
            if self.spec.log_density:
                val[sel] = lq
                if want_grad:
                    grad[sel] = g
            else:
                q = np.exp(lq)
                val[sel] = q
                if want_grad:
                    grad[sel] = q[:, None] * g
        return val, grad

    def value(self, Xp, rows):
        D = Xp - self.X[rows]
        val = np.einsum("ij,ij->i", D, D)
        if self.spec.gamma:
            val = val + self.spec.gamma * loss(self.model, Xp, self.Y[rows])
        if len(self.classes):
            val = val - self.spec.tau * self._density(Xp, rows, False)[0]
        return val

    def value_grad(self, Xp, rows):
        D = Xp - self.X[rows]
        val = np.einsum("ij,ij->i", D, D)
        grad = 2.0 * D
        if self.spec.gamma:
            val = val + self.spec.gamma * loss(self.model, Xp, self.Y[rows])
            grad = grad + self.spec.gamma * grad_input(self.model, Xp, self.Y[rows])
        if len(self.classes):
            q, gq = self._density(Xp, rows, True)
            val = val - self.spec.tau * q
            grad = grad - self.spec.tau * gq
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(val))):
            raise PerturbationError("non-finite smooth gradient in p-CFE")
        return val, grad


def pcfe_objective(model, est, x, target, spec: PcfeSpec, x_prime, beta=None):
    """Composite objective (smooth part + beta * l0 distance) at ``x_prime``."""
    X, Y, single = _batch(x, target)
    Xp = np.atleast_2d(np.asarray(x_prime, dtype=DTYPE))
    rows = np.arange(X.shape[0])
    b = spec.beta if beta is None else np.asarray(beta, dtype=DTYPE)
    val = _Smooth(model, est, X, Y, spec).value(Xp, rows) + b * np.count_nonzero(Xp != X, axis=1)
    return float(val[0]) if single else val


@dataclass
class PcfeResult:
    x: np.ndarray
    objective: np.ndarray  # (rows, iterations + 1) composite objective trace
    n_modified: np.ndarray
    valid: np.ndarray
    beta: np.ndarray
    feasible: np.ndarray | None = None


def pcfe_l0(model, est, x, target, spec: PcfeSpec, lo=None, hi=None, beta=None,
            impl=None) -> PcfeResult:
    """Sparse plausible counterfactuals by monotone FISTA.

    Smooth part: ``|x'-x|^2 + gamma L(x', target) - tau q(x', target)`` (or
    ``log q`` with ``spec.log_density``); non-smooth part: ``beta |x'-x|_0``
    restricted to the box. The step ``t`` starts at ``1/spec.L`` and is halved
    at most ``spec.ls_steps`` times per iteration until the quadratic
    upper-bound condition holds. An iterate is only accepted when it does not
    increase the composite objective.
    """
    X, Y, single = _batch(x, target)
    m, d = X.shape
    lo, hi = box_bounds(spec, d, lo, hi)
    _check_inside(X, lo, hi)
    b = np.broadcast_to(np.asarray(spec.beta if beta is None else beta, dtype=DTYPE), (m,)).copy()
    iters = _resolve_iters(spec.iterations, spec.iters_per_dim, d)
    smooth = _Smooth(model, est, X, Y, spec)
    all_rows = np.arange(m)

    def F(vals, Z, rows):
        return vals + b[rows] * np.count_nonzero(Z != X[rows], axis=1)

    xk = X.copy()
    fk = F(smooth.value(xk, all_rows), xk, all_rows)
    trace = np.empty((m, iters + 1))
    trace[:, 0] = fk
    yk = xk.copy()
    theta = np.ones(m)
    t = np.full(m, 1.0 / spec.L)
    for k in range(iters):
        gy, grad_y = smooth.value_grad(yk, all_rows)
        z = np.empty_like(X)
        sz = np.empty(m)
        pending = all_rows
        for attempt in range(spec.ls_steps + 1):
            tp = t[pending]
            zp = kernels.prox_l0_box(yk[pending] - tp[:, None] * grad_y[pending],
                                     X[pending], tp * b[pending], lo, hi, impl=impl)
            z[pending] = zp
            sz[pending] = vz = smooth.value(zp, pending)
            if attempt == spec.ls_steps:
                break
            diff = zp - yk[pending]
            bound = gy[pending] + np.einsum("ij,ij->i", grad_y[pending], diff) \
                + np.einsum("ij,ij->i", diff, diff) / (2.0 * tp)
            ok = vz <= bound + 1e-12 * np.abs(bound)
            if np.all(ok):
                break
            pending = pending[~ok]
            t[pending] *= 0.5
        fz = F(sz, z, all_rows)
        better = fz <= fk
        x_new = np.where(better[:, None], z, xk)
        f_new = np.where(better, fz, fk)
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta ** 2))
        yk = x_new + (theta / theta_new)[:, None] * (z - x_new) \
            + ((theta - 1.0) / theta_new)[:, None] * (x_new - xk)
        # extrapolation may leave the box; the prox only needs y finite
        xk, fk, theta = x_new, f_new, theta_new
        trace[:, k + 1] = fk
    n_mod = np.count_nonzero(xk != X, axis=1)
    valid = np.asarray(predict(model, xk)) == Y
    res = PcfeResult(xk, trace, n_mod, np.atleast_1d(valid), b)
    if single:
        res = PcfeResult(xk[0], trace[0], n_mod[0], bool(valid[0]), b[0])
    return res


def tune_beta_for_ratio(model, est, x, target, spec: PcfeSpec, target_ratio=None,
                        lo=None, hi=None, bracket=(1e-8, 1e3), max_probes=20,
                        impl=None) -> PcfeResult:
    """Per-row bisection (in log beta) for the run whose modified-coordinate
    count is the largest not exceeding ``ceil(target_ratio * d)``.

    Ties prefer the larger beta. Rows where even the largest beta overshoots
    get ``feasible=False`` and the sparsest run seen.
    """
    ratio = spec.target_ratio if target_ratio is None else target_ratio
    if ratio is None or not 0 < ratio <= 1:
        raise ValueError("target_ratio must lie in (0, 1]")
    X, Y, single = _batch(x, target)
    m, d = X.shape
    cap = math.ceil(ratio * d - 1e-9)
    lo_b = np.full(m, math.log(bracket[0]))
    hi_b = np.full(m, math.log(bracket[1]))

    best = None  # (count, beta, x, trace, valid) per row, updated in place
    sparsest = None

    def absorb(res):
        nonlocal best, sparsest
        feas = res.n_modified <= cap
        if best is None:
            best = dict(n=np.where(feas, res.n_modified, -1), beta=res.beta.copy(),
                        x=res.x.copy(), obj=res.objective.copy(), valid=res.valid.copy())
            sparsest = dict(n=res.n_modified.copy(), beta=res.beta.copy(), x=res.x.copy(),
                            obj=res.objective.copy(), valid=res.valid.copy())
            return feas
        take = feas & ((res.n_modified > best["n"]) |
                       ((res.n_modified == best["n"]) & (res.beta > best["beta"])))
        for key, val in (("n", res.n_modified), ("beta", res.beta), ("valid", res.valid)):
            best[key] = np.where(take, val, best[key])
        best["x"][take] = res.x[take]
        best["obj"][take] = res.objective[take]
        sp = res.n_modified < sparsest["n"]
        for key, val in (("n", res.n_modified), ("beta", res.beta), ("valid", res.valid)):
            sparsest[key] = np.where(sp, val, sparsest[key])
        sparsest["x"][sp] = res.x[sp]
        sparsest["obj"][sp] = res.objective[sp]
        return feas

    run = lambda logb: pcfe_l0(model, est, X, Y, spec, lo, hi, beta=np.exp(logb), impl=impl)
    feas_hi = absorb(run(hi_b))
    feas_lo = absorb(run(lo_b))
    # rows already feasible at the low end are done: nothing can beat their count
    active = feas_hi & ~feas_lo
    for _ in range(max(0, max_probes - 2)):
        if not np.any(active):
            break
        mid = 0.5 * (lo_b + hi_b)
        feas = absorb(run(np.where(active, mid, hi_b)))
        hi_b = np.where(active & feas, mid, hi_b)
        lo_b = np.where(active & ~feas, mid, lo_b)
    ok = best["n"] >= 0
    pick = lambda key: np.where(ok[:, None] if best[key].ndim == 2 else ok,
                                best[key], sparsest[key])
    n_mod = np.where(ok, best["n"], sparsest["n"])
    res = PcfeResult(pick("x"), pick("obj"), n_mod, pick("valid"), pick("beta"), ok)
    if single:
        res = PcfeResult(res.x[0], res.objective[0], res.n_modified[0], bool(res.valid[0]),
                         res.beta[0], bool(ok[0]))
    return res


def noise_baseline(x, spec: NoiseSpec, rng, lo=None, hi=None):
    """Random perturbation of matched size.

    l2: ``eps * u`` with ``u`` uniform on the unit sphere; linf: ``eps * s``
    with uniform random signs; l0: ``magnitude`` coordinates per row redrawn
    uniformly in ``[lo, hi]``.
    """
    x = np.asarray(x, dtype=DTYPE)
    X = np.atleast_2d(x)
    m, d = X.shape
    if spec.norm == "l2":
        U = rng.standard_normal((m, d))
        U /= np.sqrt(np.einsum("ij,ij->i", U, U))[:, None]
        out = X + spec.magnitude * U
    elif spec.norm == "linf":
        out = X + spec.magnitude * rng.choice(np.array([-1.0, 1.0]), size=(m, d))
    else:
        k = int(round(spec.magnitude))
        if not 0 <= k <= d:
            raise ValueError(f"l0 noise magnitude must be in [0, {d}]")
        if lo is None or hi is None:
            raise BoxError("l0 noise needs the feature range")
        lo = np.broadcast_to(lo, (d,))
        hi = np.broadcast_to(hi, (d,))
        out = X.copy()
        rows = np.arange(m)[:, None]
        cols = np.argsort(rng.random((m, d)), axis=1)[:, :k]
        out[rows, cols] = rng.uniform(lo[cols], hi[cols])
    return out[0] if x.ndim == 1 else out


def perturbation_sizes(X, Xt):
    D = np.atleast_2d(Xt) - np.atleast_2d(X)
    return {
        "l0": np.count_nonzero(D, axis=1),
        "l2": np.sqrt(np.einsum("ij,ij->i", D, D)),
        "linf": np.max(np.abs(D), axis=1) if D.shape[1] else np.zeros(D.shape[0]),
    }


def save_perturbed(path, index, targets, X, Xt, valid, spec=None) -> None:
    """Perturbed-dataset dump: one record per row (original index, target,
    perturbed input, l0/l2/linf size, validity flag)."""
    sizes = perturbation_sizes(X, Xt)
    meta = {"format": "perturb_learn.perturbed", "version": 1,
            "spec": None if spec is None else {"kind": spec.kind, **spec.__dict__}}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, default=float)),
                 index=np.asarray(index, dtype=np.int64),
                 target=np.asarray(targets, dtype=np.int64), x=np.asarray(Xt, dtype=DTYPE),
                 l0=sizes["l0"], l2=sizes["l2"], linf=sizes["linf"],
                 valid=np.asarray(valid, dtype=bool))


def load_perturbed(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "perturb_learn.perturbed":
            raise ValueError(f"{path} is not a perturbed-dataset dump")
        out = {k: z[k] for k in z.files if k != "meta"}
    out["meta"] = meta
    return out


def is_valid(model, Xt, targets):
    return np.atleast_1d(np.asarray(predict(model, Xt)) == np.asarray(targets))

