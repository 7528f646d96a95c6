"""Datasets: synthetic generators, the grouped spurious-correlation benchmark,
IDX (MNIST-format) files, splitting and normalisation."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import DTYPE, new_rng

__all__ = [
    "Dataset",
    "SyntheticSpec",
    "SpuriousSpec",
    "gen_synthetic",
    "gen_spurious",
    "load_idx",
    "write_idx",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "split",
    "normalize",
    "save_dataset",
    "load_dataset",
    "data_dir",
]

DATA_DIR_ENV = "PERTURB_LEARN_DATA_DIR"
IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049
DATASET_VERSION = 1


def data_dir(default="."):
    return os.environ.get(DATA_DIR_ENV, default)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray | None = None
    group_table: tuple = ()
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=DTYPE)
        if X.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        y = np.asarray(self.y)
        if y.shape != (X.shape[0],):
            raise ValueError("labels must have one entry per row")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y.astype(np.int64))
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=np.int64)
            if g.shape != y.shape:
                raise ValueError("group ids must have one entry per row")
            if g.size and (g.min() < 0 or g.max() >= len(self.group_table)):
                raise ValueError("group id outside the declared group table")
            object.__setattr__(self, "groups", g)
            object.__setattr__(self, "group_table", tuple(tuple(t) for t in self.group_table))
        d = X.shape[1]
        if self.lo is None:
            lo = X.min(axis=0) if X.shape[0] else np.zeros(d)
        else:
            lo = np.broadcast_to(np.asarray(self.lo, dtype=DTYPE), (d,)).copy()
        if self.hi is None:
            hi = X.max(axis=0) if X.shape[0] else np.zeros(d)
        else:
            hi = np.broadcast_to(np.asarray(self.hi, dtype=DTYPE), (d,)).copy()
        if np.any(lo > hi):
            raise ValueError("feature range has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __len__(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def classes(self):
        return np.unique(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], y=self.y[idx],
                       groups=None if self.groups is None else self.groups[idx])

    def with_features(self, X, y=None) -> "Dataset":
        """Same rows with new features (and optionally labels); keeps range metadata."""
        return replace(self, X=X, y=self.y if y is None else y)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.X, self.y, self.lo, self.hi):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.groups is not None:
            h.update(self.groups.tobytes())
            h.update(json.dumps(self.group_table).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class SyntheticSpec:
    distribution: str = "gaussian"
    d: int = 100
    N: int = 1000
    eta: float = 1.0
    sigma: float = 1.0
    seed: int = 0
    n_test: int = 2000

    def __post_init__(self):
        if self.distribution not in ("gaussian", "uniform"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.d < 1 or self.N < 2 or not self.sigma > 0:
            raise ValueError("need d >= 1, N >= 2, sigma > 0")


def _synthetic(spec: SyntheticSpec, n: int, rng) -> Dataset:
    y = rng.choice(np.array([-1, 1]), size=n)
    shift = spec.eta / np.sqrt(spec.d)
    if spec.distribution == "gaussian":
        noise = rng.standard_normal((n, spec.d))
    else:
        noise = rng.uniform(-1.0, 1.0, size=(n, spec.d))
    X = y[:, None] * shift + spec.sigma * noise
    return Dataset(X, y)


def gen_synthetic(spec: SyntheticSpec):
    """Two-class mean-shift data ``x = y * eta * 1/sqrt(d) + sigma * noise``.

    Returns ``(train, test)``; the test split (``spec.n_test`` rows) comes from
    an independent stream of the same seed. Both splits share the train
    feature range.
    """
    rng = new_rng(spec.seed)
    train = _synthetic(spec, spec.N, rng)
    test = _synthetic(spec, spec.n_test, rng) if spec.n_test else None
    prov = {"generator": "synthetic", **spec.__dict__}
    train = replace(train, provenance=prov)
    if test is not None:
        test = replace(test, lo=train.lo, hi=train.hi, provenance={**prov, "split": "test"})
    return train, test


@dataclass(frozen=True)
class SpuriousSpec:
    d_core: int = 5
    d_spur: int = 100
    N: int = 5000
    eta_core: float = 1.0
    eta_spur: float = 3.0
    rho: float = 0.95
    seed: int = 0
    n_test: int = 4000

    def __post_init__(self):
        if not 0.5 < self.rho < 1.0:
            raise ValueError("rho must lie in (0.5, 1)")
        if self.d_core < 1 or self.d_spur < 1:
            raise ValueError("both feature blocks need at least one coordinate")
        if not self.eta_spur > self.eta_core:
            raise ValueError("spurious separation must exceed core separation")


# group id -> (attribute, label)
SPURIOUS_GROUPS = ((-1, -1), (-1, 1), (1, -1), (1, 1))


def _spurious(spec: SpuriousSpec, n: int, rho: float, rng) -> Dataset:
    y = rng.choice(np.array([-1, 1]), size=n)
    a = np.where(rng.random(n) < rho, y, -y)
    core = y[:, None] * (spec.eta_core / np.sqrt(spec.d_core)) \
        + rng.standard_normal((n, spec.d_core))
    spur = a[:, None] * (spec.eta_spur / np.sqrt(spec.d_spur)) \
        + rng.standard_normal((n, spec.d_spur))
    groups = 2 * (a > 0) + (y > 0)
    return Dataset(np.hstack([core, spur]), y, groups, SPURIOUS_GROUPS)


def gen_spurious(spec: SpuriousSpec):
    """Grouped benchmark: a core block tied to the label and a stronger
    spurious block tied to an attribute that agrees with the label with
    probability ``rho`` in training and 0.5 in the (balanced) test split.

    Returns ``(train, test)``; coordinates ``[0, d_core)`` are the core block.
    """
    rng = new_rng(spec.seed)
    train = _spurious(spec, spec.N, spec.rho, rng)
    test = _spurious(spec, spec.n_test, 0.5, rng)
    prov = {"generator": "spurious", **spec.__dict__}
    train = replace(train, provenance=prov)
    test = replace(test, lo=train.lo, hi=train.hi, provenance={**prov, "split": "test"})
    return train, test


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: wrong magic {found} (expected {magic})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(
            f"{path}: payload has {len(raw) - header} bytes, header declares {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(DTYPE) / 255.0
    h = hashlib.sha256()
    for p in (images_path, labels_path):
        with open(p, "rb") as fh:
            h.update(fh.read())
    return Dataset(X, labels.astype(np.int64), lo=0.0, hi=1.0,
                   provenance={"generator": "idx", "sha256": h.hexdigest(),
                               "shape": list(images.shape[1:])})


def write_idx(images, labels, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def split(data: Dataset, fractions=(0.8, 0.2), seed: int = 0):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-12 or min(fractions) < 0:
        raise ValueError("fractions must be two non-negative numbers summing to 1")
    n = len(data)
    n_train = int(round(fractions[0] * n))
    order = new_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train:])
    for frac, idx, name in zip(fractions, parts, ("train", "test")):
        if frac > 0 and idx.size == 0:
            raise ValueError(f"{name} split is empty")
    return data.subset(parts[0]), data.subset(parts[1])


def normalize(data: Dataset, policy: str = "standardize", reference: Dataset | None = None):
    """Apply a normalisation policy; statistics come from ``reference``
    (typically the training split) or from ``data`` itself."""
    if policy == "none":
        return data
    if policy != "standardize":
        raise ValueError(f"unknown normalisation policy {policy!r}")
    ref = data if reference is None else reference
    mean = ref.X.mean(axis=0)
    std = ref.X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return replace(data, X=(data.X - mean) / std, lo=(data.lo - mean) / std,
                   hi=(data.hi - mean) / std,
                   provenance={**data.provenance, "normalize": policy})


def save_dataset(data: Dataset, path) -> None:
    meta = {"format": "perturb_learn.dataset", "version": DATASET_VERSION,
            "group_table": [list(t) for t in data.group_table],
            "provenance": data.provenance}
    arrays = dict(X=data.X, y=data.y, lo=data.lo, hi=data.hi)
    if data.groups is not None:
        arrays["groups"] = data.groups
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, default=str)), **arrays)


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "perturb_learn.dataset":
            raise ValueError(f"{path} is not a dataset file")
        groups = z["groups"] if "groups" in z.files else None
        return Dataset(z["X"], z["y"], groups, tuple(map(tuple, meta["group_table"])),
                       z["lo"], z["hi"], meta["provenance"])
