"""Linear and ReLU-MLP classifiers with hand-derived gradients.

Binary models use a single margin output ``f(x)`` with labels in ``{-1, +1}``
and an exponential or logistic loss. Multi-class models emit ``C`` logits,
take labels in ``{0, ..., C-1}`` and use cross-entropy.

All functions accept a single sample (1-D) or a batch (2-D, one row per
sample).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from .numerics import DTYPE, NonFiniteError, OptimConfig, OptimState, new_rng

__all__ = [
    "Model",
    "LOSS_KINDS",
    "init_model",
    "forward",
    "loss",
    "mean_loss",
    "grad_params",
    "grad_input",
    "train",
    "predict",
    "save_model",
    "load_model",
    "TrainingDiverged",
]

log = logging.getLogger(__name__)

LOSS_KINDS = ("exponential", "logistic", "cross_entropy")
BINARY_LOSSES = ("exponential", "logistic")
CHECKPOINT_VERSION = 1


class TrainingDiverged(NonFiniteError):
    pass


@dataclass(frozen=True)
class Model:
    weights: tuple
    biases: tuple
    loss_kind: str = "logistic"
    n_classes: int = 2
    hidden: tuple = ()
    trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind in BINARY_LOSSES and self.n_classes != 2:
            raise ValueError(f"{self.loss_kind} loss needs a binary margin head")
        if self.loss_kind == "cross_entropy" and self.n_classes < 2:
            raise ValueError("cross-entropy needs at least 2 classes")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights/biases must be nonempty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i} has inconsistent shapes")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} does not chain with layer {i - 1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        if self.weights[-1].shape[1] != self.out_dim:
            raise ValueError("output layer width does not match the head")

    @property
    def arch(self) -> str:
        return "mlp" if self.hidden else "linear"

    @property
    def binary(self) -> bool:
        return self.loss_kind in BINARY_LOSSES

    @property
    def out_dim(self) -> int:
        return 1 if self.binary else self.n_classes

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params) -> "Model":
        params = [np.asarray(p, dtype=DTYPE) for p in params]
        return replace(self, weights=tuple(params[0::2]), biases=tuple(params[1::2]))


def init_model(d: int, *, hidden=(), loss_kind: str = "logistic", n_classes: int = 2,
               rng=None, seed: int = 0, zero: bool = False) -> Model:
    """Initialise weights uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    rng = new_rng(seed) if rng is None else rng
    out_dim = 1 if loss_kind in BINARY_LOSSES else n_classes
    widths = [int(d), *map(int, hidden), out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        if zero:
            weights.append(np.zeros((fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        else:
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Model(tuple(weights), tuple(biases), loss_kind, n_classes, tuple(map(int, hidden)))


def _as_batch(model: Model, x):
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"input dimension {X.shape[-1]} != model dimension {model.dim}")
    return X, single


def _forward_cache(model: Model, X):
    pre, acts = [], [X]
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w + b
        pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
        acts.append(h)
    return pre, acts


def forward(model: Model, x) -> np.ndarray:
    """Logits. Binary models return the margin ``f(x)`` (scalar or shape (n,))."""
    X, single = _as_batch(model, x)
    z = _forward_cache(model, X)[1][-1]
    if model.binary:
        z = z[:, 0]
    return z[0] if single else z


def _check_labels(model: Model, y):
    y = np.asarray(y)
    if model.binary:
        if not np.all((y == 1) | (y == -1)):
            raise ValueError("binary labels must be -1 or +1")
        return y.astype(DTYPE)
    if not (np.issubdtype(y.dtype, np.integer) or np.all(y == np.round(y))):
        raise ValueError("class labels must be integers")
    y = y.astype(np.int64)
    if np.any((y < 0) | (y >= model.n_classes)):
        raise ValueError(f"class labels must lie in [0, {model.n_classes})")
    return y


def _loss_and_dz(model: Model, z, y):
    """Per-sample loss and dL/dz for logits ``z`` of shape (n, out)."""
    if model.loss_kind == "exponential":
        m = -y * z[:, 0]
        val = np.exp(m)
        return val, (-y * val)[:, None]
    if model.loss_kind == "logistic":
        m = -y * z[:, 0]
        val = np.logaddexp(0.0, m)
        return val, (-y * expit(m))[:, None]
    lse = logsumexp(z, axis=1)
    idx = np.arange(len(y))
    val = lse - z[idx, y]
    dz = np.exp(z - lse[:, None])
    dz[idx, y] -= 1.0
    return val, dz


def loss(model: Model, x, y):
    """Per-sample loss (scalar for a single sample)."""
    X, single = _as_batch(model, x)
    yy = _check_labels(model, np.atleast_1d(y))
    z = _forward_cache(model, X)[1][-1]
    val = _loss_and_dz(model, z, yy)[0]
    return float(val[0]) if single else val


def mean_loss(model: Model, X, y) -> float:
    return float(np.mean(loss(model, np.atleast_2d(X), y)))


def _backward(model: Model, X, y, scale_by_n: bool):
    pre, acts = _forward_cache(model, X)
    _, dz = _loss_and_dz(model, acts[-1], y)
    if scale_by_n:
        dz = dz / X.shape[0]
    grads = [None] * (2 * len(model.weights))
    da = dz
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ da
        grads[2 * i + 1] = da.sum(axis=0)
        dh = da @ model.weights[i].T
        if i:
            da = dh * (pre[i - 1] > 0.0)
    return grads, dh


def grad_params(model: Model, X, y) -> list:
    """Gradient of the mean batch loss w.r.t. every parameter (W0, b0, W1, ...)."""
    X, _ = _as_batch(model, X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    yy = _check_labels(model, np.atleast_1d(y))
    return _backward(model, X, yy, True)[0]


def grad_input(model: Model, x, y) -> np.ndarray:
    """Per-sample input gradient of the loss, same shape as ``x``."""
    X, single = _as_batch(model, x)
    yy = _check_labels(model, np.atleast_1d(y))
    if model.arch == "linear":
        _, dz = _loss_and_dz(model, X @ model.weights[0] + model.biases[0], yy)
        dX = dz @ model.weights[0].T
    else:
        dX = _backward(model, X, yy, False)[1]
    return dX[0] if single else dX


def predict(model: Model, x):
    """Class decision; ties go to -1 (binary) or the smallest class index."""
    z = forward(model, x)
    if model.binary:
        out = np.where(np.asarray(z) > 0.0, 1, -1)
    else:
        out = np.argmax(np.atleast_2d(z), axis=1)
        if np.ndim(z) == 1:
            out = out[0]
    return int(out) if np.ndim(out) == 0 else out


def _unpack(data):
    if hasattr(data, "X") and hasattr(data, "y"):
        return data.X, data.y
    X, y = data
    return X, y


def train(init: Model, data, opt: OptimConfig, rng=None) -> Model:
    """Minibatch ERM. The returned model carries the per-epoch full-data loss
    in ``model.trace``."""
    X, y = _unpack(data)
    X = np.asarray(X, dtype=DTYPE)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    yy = _check_labels(init, y)
    if opt.epochs == 0:
        return init
    rng = new_rng(opt.seed) if rng is None else rng
    state = OptimState(opt)
    params = [p.copy() for p in init.params]
    model = init
    trace = []
    with np.errstate(over="ignore", invalid="ignore"):
        model, params = _epochs(model, params, state, X, yy, opt, rng, trace)
    return replace(model.with_params(params), trace=tuple(trace))


def _epochs(model, params, state, X, yy, opt, rng, trace):
    n = X.shape[0]
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            grads, _ = _backward(model, X[idx], yy[idx], True)
            params = state.step(params, grads)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDiverged(
                    f"non-finite parameters in epoch {epoch}; learning rate {opt.lr} too high?")
            model = _unchecked(model, params)
        _, acts = _forward_cache(model, X)
        ep_loss = float(np.mean(_loss_and_dz(model, acts[-1], yy)[0]))
        if not np.isfinite(ep_loss):
            raise TrainingDiverged(
                f"non-finite training loss in epoch {epoch}; learning rate {opt.lr} too high?")
        trace.append(ep_loss)
        log.debug("epoch %d loss %.6g", epoch, ep_loss)
    return model, params


def _unchecked(model: Model, params) -> Model:
    # skip __post_init__ validation inside the training loop
    m = object.__new__(Model)
    object.__setattr__(m, "weights", tuple(params[0::2]))
    object.__setattr__(m, "biases", tuple(params[1::2]))
    for name in ("loss_kind", "n_classes", "hidden", "trace"):
        object.__setattr__(m, name, getattr(model, name))
    return m


def save_model(model: Model, path) -> None:
    meta = {
        "format": "perturb_learn.model",
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "hidden": list(model.hidden),
        "loss_kind": model.loss_kind,
        "n_classes": model.n_classes,
        "n_layers": len(model.weights),
        "trace": list(model.trace),
    }
    arrays = {f"p{i}": p for i, p in enumerate(model.params)}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_model(path) -> Model:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "perturb_learn.model":
            raise ValueError(f"{path} is not a model checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = [z[f"p{i}"] for i in range(2 * meta["n_layers"])]
    return Model(tuple(params[0::2]), tuple(params[1::2]), meta["loss_kind"],
                 meta["n_classes"], tuple(meta["hidden"]), tuple(meta["trace"]))
