"""Dense arithmetic helpers, seeded RNG and first-order optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "OptimConfig",
    "OptimState",
    "NonFiniteError",
    "new_rng",
    "norm",
    "matmul",
    "check_finite",
    "optimizer_step",
]

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def new_rng(seed: int) -> np.random.Generator:
    """Return an explicitly seeded PCG64 generator.

    Nothing in the package touches numpy's global RNG; every random draw goes
    through a generator created here and handed down by the caller.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def check_finite(arr, name: str = "array") -> np.ndarray:
    arr = np.asarray(arr, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def norm(v, p) -> float:
    """l0 (exact nonzero count), l2 or linf norm of a vector."""
    v = np.asarray(v, dtype=DTYPE).ravel()
    if p == 0:
        return float(np.count_nonzero(v))
    if p == 2:
        return float(np.sqrt(np.dot(v, v)))
    if p in (np.inf, "inf"):
        return float(np.max(np.abs(v))) if v.size else 0.0
    raise ValueError(f"unsupported norm order {p!r}")


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"shape mismatch {a.shape} @ {b.shape}")
    return a @ b


@dataclass
class OptimConfig:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class OptimState:
    """Per-parameter-list optimizer state (momentum buffers / Adam moments)."""

    config: OptimConfig
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list, grads: list) -> list:
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"dimension mismatch {p.shape} vs {g.shape}")
        cfg = self.config
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.kind == "sgd":
                if cfg.momentum:
                    # torch convention: first step seeds the buffer with g
                    self.m[i] = g.copy() if self.t == 1 else cfg.momentum * self.m[i] + g
                    g = self.m[i]
                out.append(p - cfg.lr * g)
            else:
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g
                m_hat = self.m[i] / (1.0 - cfg.beta1 ** self.t)
                v_hat = self.v[i] / (1.0 - cfg.beta2 ** self.t)
                out.append(p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
        return out


def optimizer_step(state: OptimState, params, grad) -> np.ndarray:
    """Single-vector convenience wrapper around :meth:`OptimState.step`."""
    params = np.asarray(params, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if params.shape != grad.shape:
        raise ValueError(f"dimension mismatch {params.shape} vs {grad.shape}")
    return state.step([params], [grad])[0]
