"""Learning from perturbations: train, perturb toward wrong targets, retrain
from scratch on the perturbed data, evaluate on clean data."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import perturb as P
from .data import Dataset
from .density import fit_gmm, fit_kde, load_estimator, save_estimator
from .metrics import accuracy, group_report
from .model import init_model, load_model, save_model, train
from .numerics import OptimConfig, new_rng

__all__ = [
    "TargetAssignment",
    "PerturbedData",
    "PipelineConfig",
    "PipelineResult",
    "GenerationError",
    "assign_targets",
    "fit_density",
    "build_perturbed_dataset",
    "matched_noise",
    "learn_from_perturbations",
    "config_hash",
]

log = logging.getLogger(__name__)

CHUNK_SIZE = 256


class GenerationError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"perturbation of sample {index} failed: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class TargetAssignment:
    mode: str
    seed: int | None
    targets: np.ndarray


def _is_binary(labels):
    return np.all(np.isin(labels, (-1, 1)))


def assign_targets(labels, mode: str = "random", C: int = 2, rng=None,
                   seed: int | None = None) -> TargetAssignment:
    """Pick a target label different from each true label.

    Binary +-1 labels always flip. For classes ``0..C-1``, ``deterministic``
    maps ``y -> (y + 1) mod C`` and ``random`` draws uniformly among the other
    ``C - 1`` classes.
    """
    if C < 2:
        raise ValueError("need at least two classes")
    if mode not in ("deterministic", "random"):
        raise ValueError(f"unknown target mode {mode!r}")
    y = np.asarray(labels, dtype=np.int64)
    if _is_binary(y) and C == 2:
        return TargetAssignment(mode, seed, -y)
    if np.any((y < 0) | (y >= C)):
        raise ValueError(f"labels must lie in [0, {C})")
    if mode == "deterministic":
        return TargetAssignment(mode, seed, (y + 1) % C)
    rng = new_rng(0 if seed is None else seed) if rng is None else rng
    return TargetAssignment(mode, seed, (y + rng.integers(1, C, size=y.shape)) % C)


@dataclass(frozen=True)
class DensityConfig:
    kind: str = "gmm"
    h: float | None = None
    K: int = 1
    seed: int = 0
    max_iter: int = 100


def fit_density(data, cfg: DensityConfig):
    if cfg.kind == "kde":
        return fit_kde(data, cfg.h)
    return fit_gmm(data, cfg.K, max_iter=cfg.max_iter, seed=cfg.seed)


@dataclass
class PerturbedData:
    dataset: Dataset  # perturbed inputs labelled with their targets
    index: np.ndarray  # row -> original sample index
    valid: np.ndarray
    sizes: dict
    spec: object

    @property
    def validity_rate(self):
        return float(np.mean(self.valid)) if self.valid.size else float("nan")

    def stats(self):
        return {k: {"mean": float(np.mean(v)), "max": float(np.max(v))}
                for k, v in self.sizes.items() if len(v)}


def _chunk_rng(seed, chunk):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(chunk)])))


def _generate(model, est, X, Y, spec, lo, hi, chunk_id):
    if spec.kind == "pgd":
        return P.pgd_targeted(model, X, Y, spec, lo, hi)
    if spec.kind == "cfe":
        return P.cfe_l2(model, X, Y, spec)
    if spec.kind == "pcfe":
        if spec.target_ratio is not None:
            return P.tune_beta_for_ratio(model, est, X, Y, spec, lo=lo, hi=hi).x
        return P.pcfe_l0(model, est, X, Y, spec, lo, hi).x
    if spec.kind == "noise":
        return P.noise_baseline(X, spec, _chunk_rng(spec.seed, chunk_id), lo, hi)
    raise ValueError(f"unknown perturbation kind {spec.kind!r}")


def build_perturbed_dataset(model, data: Dataset, targets, spec, est=None, workers: int = 1,
                            keep: str = "all", chunk_size: int = CHUNK_SIZE) -> PerturbedData:
    """Perturb every row of ``data`` toward its target.

    Rows are processed in fixed chunks, so the result is identical for any
    number of workers.
    """
    targets = np.asarray(targets.targets if isinstance(targets, TargetAssignment) else targets)
    n = len(data)
    if targets.shape != (n,):
        raise ValueError("one target per sample required")
    if spec.kind == "pcfe" and spec.tau and est is None:
        raise ValueError("p-CFE with a plausibility term needs a density estimator")
    starts = list(range(0, n, chunk_size))

    def job(ci):
        s = starts[ci]
        sl = slice(s, min(n, s + chunk_size))
        try:
            return _generate(model, est, data.X[sl], targets[sl], spec, data.lo, data.hi, ci)
        except (FloatingPointError, ValueError) as exc:
            for i in range(sl.start, sl.stop):
                try:
                    _generate(model, est, data.X[i:i + 1], targets[i:i + 1], spec,
                              data.lo, data.hi, ci)
                except (FloatingPointError, ValueError) as inner:
                    raise GenerationError(i, inner) from inner
            raise GenerationError(sl.start, exc) from exc

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, range(len(starts))))
    else:
        parts = [job(ci) for ci in range(len(starts))]
    Xt = np.vstack(parts) if parts else np.empty_like(data.X)
    valid = np.atleast_1d(P.is_valid(model, Xt, targets)) if n else np.zeros(0, bool)
    sizes = P.perturbation_sizes(data.X, Xt)
    index = np.arange(n)
    if keep == "valid":
        index = index[valid]
    elif keep != "all":
        raise ValueError(f"unknown keep policy {keep!r}")
    pert = replace(data, X=Xt[index], y=targets[index],
                   groups=None if data.groups is None else data.groups[index],
                   provenance={**data.provenance, "perturbed": spec.kind})
    log.info("%s: validity %.3f, mean l2 %.4g, mean l0 %.1f", spec.kind,
             float(np.mean(valid)) if n else float("nan"),
             float(np.mean(sizes["l2"])) if n else 0.0,
             float(np.mean(sizes["l0"])) if n else 0.0)
    return PerturbedData(pert, index, valid, sizes, spec)


def matched_noise(spec, pert: PerturbedData | None, seed: int):
    """Noise baseline with the same budget as the main perturbation.

    PGD noise uses the same norm and eps; CFE noise the mean achieved l2 size;
    p-CFE noise the mean number of modified coordinates.
    """
    if spec.kind == "pgd":
        return P.NoiseSpec(spec.norm, spec.eps, seed)
    if spec.kind == "cfe":
        return P.NoiseSpec("l2", float(np.mean(pert.sizes["l2"])), seed)
    if spec.kind == "pcfe":
        return P.NoiseSpec("l0", float(np.round(np.mean(pert.sizes["l0"]))), seed)
    if spec.kind == "noise":
        return replace(spec, seed=seed)
    raise ValueError(f"no noise matching for {spec.kind!r}")


@dataclass(frozen=True)
class PipelineConfig:
    perturb: object = field(default_factory=lambda: P.PgdSpec())
    hidden: tuple = ()
    loss_kind: str = "logistic"
    n_classes: int = 2
    opt: OptimConfig = field(default_factory=OptimConfig)
    relearn_opt: OptimConfig | None = None
    target_mode: str = "random"
    density: DensityConfig = field(default_factory=DensityConfig)
    seed_model: int = 1
    seed_targets: int = 2
    seed_perturb: int = 3
    seed_relearn: int = 4
    noise: bool = True
    noise_labels: str = "target"
    keep: str = "all"
    workers: int = 1
    n_adv: int | None = None  # perturb only the first n_adv training rows


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        out = {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return out
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(*objs) -> str:
    payload = json.dumps([_jsonable(o) for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class PipelineResult:
    source: object
    perturbed: PerturbedData
    relearned: object
    train_acc: float
    test_acc: float
    relearn_fit_acc: float
    validity_rate: float
    noise_train_acc: float | None = None
    noise_test_acc: float | None = None
    noise_model: object = None
    noise_spec: object = None
    source_train_acc: float = float("nan")
    source_test_acc: float = float("nan")
    groups: dict = field(default_factory=dict)

    def summary(self):
        out = {
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "relearn_fit_acc": self.relearn_fit_acc,
            "source_train_acc": self.source_train_acc,
            "source_test_acc": self.source_test_acc,
            "validity_rate": self.validity_rate,
            "noise_train_acc": self.noise_train_acc,
            "noise_test_acc": self.noise_test_acc,
            "perturbation": self.perturbed.stats(),
        }
        if self.groups:
            out["groups"] = self.groups
        return out


class _Artifacts:
    """Stage artifacts under ``root``; stale ones (other config hash) are ignored."""

    def __init__(self, root, key):
        self.root = root
        self.key = key
        self.fresh = True
        self.manifest = {"config_hash": key, "artifacts": {}}
        if root is None:
            return
        os.makedirs(root, exist_ok=True)
        self.manifest_path = os.path.join(root, "manifest.json")
        manifest = {}
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as fh:
                manifest = json.load(fh)
        self.fresh = manifest.get("config_hash") != key
        self.manifest = {"config_hash": key, "artifacts": {}} if self.fresh else manifest

    def path(self, name):
        return None if self.root is None else os.path.join(self.root, name)

    def have(self, name):
        return self.root is not None and not self.fresh and \
            name in self.manifest["artifacts"] and os.path.exists(self.path(name))

    def record(self, name, **extra):
        if self.root is None:
            return
        self.manifest["artifacts"][name] = extra
        with open(self.manifest_path, "w") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True, default=str)


def _trained(art, name, opt, data, seed, cfg):
    if art.have(name):
        return load_model(art.path(name))
    d = data.d
    model = train(init_model(d, hidden=cfg.hidden, loss_kind=cfg.loss_kind,
                             n_classes=cfg.n_classes, seed=seed), data, opt)
    if art.root is not None:
        save_model(model, art.path(name))
        art.record(name, seed=seed)
    return model


def _relabel_for_noise(cfg, data, targets):
    return targets if cfg.noise_labels == "target" else data.y


def learn_from_perturbations(train_data: Dataset, test_data: Dataset, cfg: PipelineConfig,
                             artifacts_dir=None, source=None) -> PipelineResult:
    """Run the full protocol (and the noise control arm) for one configuration.

    With ``artifacts_dir`` each stage is persisted and reused on rerun with
    the same configuration. ``source`` short-circuits stage 1 with an already
    trained model.
    """
    key = config_hash(cfg, train_data.digest(), test_data.digest())
    art = _Artifacts(artifacts_dir, key)
    art.manifest["config"] = _jsonable(cfg)
    relearn_opt = cfg.relearn_opt or cfg.opt

    if source is None:
        source = _trained(art, "source.npz", cfg.opt, train_data, cfg.seed_model, cfg)
    adv_data = train_data
    if cfg.n_adv is not None:
        if cfg.n_adv < 1:
            raise ValueError("n_adv must be positive")
        adv_data = train_data.subset(np.arange(min(cfg.n_adv, len(train_data))))
    assignment = assign_targets(adv_data.y, cfg.target_mode, cfg.n_classes,
                                seed=cfg.seed_targets)
    targets = assignment.targets
    spec = cfg.perturb
    if spec.kind == "noise":
        spec = replace(spec, seed=cfg.seed_perturb)

    est = None
    if spec.kind == "pcfe" and spec.tau:
        if art.have("density.npz"):
            est = load_estimator(art.path("density.npz"))
        else:
            est = fit_density(train_data, cfg.density)
            if art.root is not None:
                save_estimator(est, art.path("density.npz"))
                art.record("density.npz")

    if art.have("perturbed.npz"):
        dump = P.load_perturbed(art.path("perturbed.npz"))
        index = dump["index"]
        Xt = dump["x"]
        pert = PerturbedData(
            replace(adv_data, X=Xt[index], y=dump["target"][index],
                    groups=None if adv_data.groups is None else adv_data.groups[index]),
            index, dump["valid"], {k: dump[k] for k in ("l0", "l2", "linf")}, spec)
    else:
        pert = build_perturbed_dataset(source, adv_data, targets, spec, est,
                                       workers=cfg.workers, keep=cfg.keep)
        if art.root is not None:
            full_x = adv_data.X.copy()
            full_x[pert.index] = pert.dataset.X
            P.save_perturbed(art.path("perturbed.npz"), pert.index, targets, adv_data.X,
                             full_x, pert.valid, spec)
            art.record("perturbed.npz", validity=pert.validity_rate)

    relearned = _trained(art, "relearned.npz", relearn_opt, pert.dataset,
                         cfg.seed_relearn, cfg)
    res = PipelineResult(
        source=source, perturbed=pert, relearned=relearned,
        train_acc=accuracy(relearned, train_data), test_acc=accuracy(relearned, test_data),
        relearn_fit_acc=accuracy(relearned, pert.dataset), validity_rate=pert.validity_rate,
        source_train_acc=accuracy(source, train_data),
        source_test_acc=accuracy(source, test_data),
    )
    if test_data.groups is not None:
        res.groups = {"train": group_report(relearned, train_data, require_all=False).as_dict(),
                      "test": group_report(relearned, test_data, require_all=False).as_dict()}

    if cfg.noise:
        nspec = matched_noise(spec, pert, cfg.seed_perturb)
        if art.have("noise_relearned.npz"):
            noise_model = load_model(art.path("noise_relearned.npz"))
        else:
            npert = build_perturbed_dataset(source, adv_data, targets, nspec,
                                            workers=cfg.workers)
            nds = npert.dataset.with_features(npert.dataset.X,
                                              _relabel_for_noise(cfg, adv_data, targets))
            noise_model = _trained(art, "noise_relearned.npz", relearn_opt, nds,
                                   cfg.seed_relearn, cfg)
        res.noise_model = noise_model
        res.noise_spec = nspec
        res.noise_train_acc = accuracy(noise_model, train_data)
        res.noise_test_acc = accuracy(noise_model, test_data)
    if art.root is not None:
        art.record("summary", **res.summary())
    return res
