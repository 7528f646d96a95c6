"""Command-line driver.

    perturb-learn <command> --config FILE [--set section.key=value]... [--workers N] [--out DIR]

Summaries are printed to stdout as one JSON object per line. Failures print a
JSON object with an ``error`` category to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from types import SimpleNamespace

import numpy as np

from . import __version__
from . import perturb as P
from .data import (IdxFormatError, SpuriousSpec, SyntheticSpec, data_dir, gen_spurious,
                   gen_synthetic, load_dataset, load_idx, normalize, save_dataset, split)
from .density import GMMDegenerateError, load_estimator, save_estimator
from .metrics import accuracy, group_report
from .model import init_model, load_model, save_model, train
from .numerics import NonFiniteError, OptimConfig
from .protocol import (DensityConfig, GenerationError, PipelineConfig, assign_targets,
                       build_perturbed_dataset, config_hash, fit_density,
                       learn_from_perturbations, matched_noise)

log = logging.getLogger("perturb_learn")

COMMANDS = ("gen-data", "train", "perturb", "relearn", "eval", "sweep", "spurious-bench")
METHODS = ("pgd_l2", "pgd_linf", "cfe_l2", "pcfe_l0", "noise_l2", "noise_linf", "noise_l0")
BENCH_METHODS = ("pgd_l2", "pgd_linf", "cfe_l2", "pcfe_l0", "original")
SWEEP_COLUMNS = ("adv_acc_for_natural", "noise_acc_for_natural", "rep", "seed")
AXIS_ALIASES = {"eps": "perturb.eps", "d": "data.d", "N": "data.N", "N_adv": "protocol.n_adv",
                "ratio": "perturb.target_ratio", "steps": "perturb.steps"}

EXIT_CODES = {"config": 2, "data": 3, "numerical": 4, "generation": 5, "partial": 6,
              "internal": 70}


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


# ---- configuration ----------------------------------------------------------

_F, _I, _B, _S = float, int, "bool", str
_OPT_KEYS = {"optimizer": _S, "lr": _F, "momentum": _F, "weight_decay": _F, "beta1": _F,
             "beta2": _F, "eps": _F, "batch_size": _I, "epochs": _I, "seed": _I}
_PERTURB_KEYS = {"method": _S, "eps": _F, "steps": _I, "step_size": _F, "clamp": _B,
                 "lam": _F, "lr": _F, "iterations": _I, "iters_per_dim": _F, "gamma": _F,
                 "tau": _F, "beta": _F, "L": _F, "ls_steps": _I, "log_density": _B,
                 "box": _F, "target_ratio": _F}
SCHEMA = {
    "data": {"generator": _S, "distribution": _S, "d": _I, "N": _I, "eta": _F, "sigma": _F,
             "seed": _I, "n_test": _I, "d_core": _I, "d_spur": _I, "eta_core": _F,
             "eta_spur": _F, "rho": _F, "images": _S, "labels": _S, "test_images": _S,
             "test_labels": _S, "path": _S, "test_path": _S, "normalize": _S,
             "test_fraction": _F, "limit": _I},
    "model": {"hidden": _S, "loss": _S, "n_classes": _I},
    "train": _OPT_KEYS,
    "relearn": _OPT_KEYS,
    "perturb": _PERTURB_KEYS,
    "density": {"kind": _S, "h": _F, "K": _I, "seed": _I, "max_iter": _I},
    "protocol": {"target_mode": _S, "seed_model": _I, "seed_targets": _I, "seed_perturb": _I,
                 "seed_relearn": _I, "noise": _B, "noise_labels": _S, "keep": _S,
                 "n_adv": _I},
    "sweep": {"axis": _S, "grid": _S, "reps": _I, "seed": _I, "file": _S},
    "bench": {"methods": _S, "seeds": _S, "file": _S},
}
for _m in BENCH_METHODS[:-1]:
    SCHEMA[_m] = _PERTURB_KEYS


def load_config(path=None, sets=()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys such as N and L are case sensitive
    if path is not None:
        if not os.path.exists(path):
            raise CliError("config", f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise CliError("config", f"cannot parse {path}: {exc}") from exc
    for item in sets:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().rpartition(".")
        if not sep or not dot or not name:
            raise CliError("config", f"--set expects section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value.strip())
    _validate(cp)
    return cp


def _validate(cp):
    for section in cp.sections():
        if section not in SCHEMA:
            raise CliError("config", f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise CliError("config", f"unknown key {key!r} in [{section}]")
            _get(cp, section, key)  # type check


def _get(cp, section, key, default=None):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key).strip()
    kind = SCHEMA[section][key]
    try:
        if raw.lower() in ("none", "") and kind is not _S:
            return None
        if kind == _B:
            return cp.getboolean(section, key)
        return kind(raw)
    except ValueError as exc:
        raise CliError("config", f"[{section}] {key} = {raw!r}: {exc}") from exc


def _section(cp, section):
    return {k: _get(cp, section, k) for k in cp[section]} if cp.has_section(section) else {}


def _floats(text):
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


# ---- builders ---------------------------------------------------------------

def build_data(cp):
    """Train/test datasets described by the [data] section."""
    s = _section(cp, "data")
    gen = s.pop("generator", None) or "synthetic"
    norm = s.pop("normalize", None) or "none"
    try:
        if gen == "synthetic":
            keys = ("distribution", "d", "N", "eta", "sigma", "seed", "n_test")
            tr, te = gen_synthetic(SyntheticSpec(**{k: s[k] for k in keys if s.get(k) is not None}))
        elif gen == "spurious":
            keys = ("d_core", "d_spur", "N", "eta_core", "eta_spur", "rho", "seed", "n_test")
            tr, te = gen_spurious(SpuriousSpec(**{k: s[k] for k in keys if s.get(k) is not None}))
        elif gen == "idx":
            root = data_dir()
            resolve = lambda p: p if os.path.isabs(p) else os.path.join(root, p)
            if not s.get("images") or not s.get("labels"):
                raise CliError("config", "[data] idx generator needs images and labels")
            tr = load_idx(resolve(s["images"]), resolve(s["labels"]))
            if s.get("test_images"):
                te = load_idx(resolve(s["test_images"]), resolve(s["test_labels"]))
            else:
                tr, te = split(tr, (1 - (s.get("test_fraction") or 0.2),
                                    s.get("test_fraction") or 0.2), seed=s.get("seed") or 0)
        elif gen == "file":
            tr = load_dataset(s["path"])
            te = load_dataset(s["test_path"])
        else:
            raise CliError("config", f"unknown data generator {gen!r}")
    except (OSError, KeyError) as exc:
        raise CliError("data", f"cannot load data: {exc}") from exc
    if s.get("limit"):
        tr = tr.subset(np.arange(min(s["limit"], len(tr))))
    if norm != "none":
        te = normalize(te, norm, reference=tr)
        tr = normalize(tr, norm)
    return tr, te


def build_opt(cp, section, fallback=None):
    s = _section(cp, section)
    if not s:
        return fallback
    base = fallback or OptimConfig()
    kw = {("kind" if k == "optimizer" else k): v for k, v in s.items() if v is not None}
    return replace(base, **kw)


def build_spec(cp, section="perturb", method=None):
    s = _section(cp, section)
    method = method or s.pop("method", None) or "pgd_l2"
    s.pop("method", None)
    s = {k: v for k, v in s.items() if v is not None}
    pick = lambda *keys: {k: s[k] for k in keys if k in s}
    if method in ("pgd_l2", "pgd_linf"):
        return P.PgdSpec(method[4:], **pick("eps", "steps", "step_size", "clamp"))
    if method == "cfe_l2":
        return P.CfeSpec(**pick("lam", "lr", "iterations", "iters_per_dim"))
    if method == "pcfe_l0":
        return P.PcfeSpec(**pick("gamma", "tau", "beta", "L", "ls_steps", "iterations",
                                 "iters_per_dim", "log_density", "box", "target_ratio"))
    if method.startswith("noise_"):
        return P.NoiseSpec(method[6:], s.get("eps", 0.5))
    raise CliError("config", f"unknown perturbation method {method!r}")


def build_pipeline(cp, workers=1, spec=None):
    m = _section(cp, "model")
    hidden = tuple(int(v) for v in (m.get("hidden") or "").replace(";", ",").split(",")
                   if v.strip())
    opt = build_opt(cp, "train", OptimConfig())
    prot = {k: v for k, v in _section(cp, "protocol").items() if v is not None}
    dens = {k: v for k, v in _section(cp, "density").items() if v is not None}
    return PipelineConfig(
        perturb=spec or build_spec(cp), hidden=hidden, loss_kind=m.get("loss") or "logistic",
        n_classes=m.get("n_classes") or 2, opt=opt, relearn_opt=build_opt(cp, "relearn", None),
        density=DensityConfig(**dens), workers=workers, **prot)


# ---- output helpers ---------------------------------------------------------

def emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _load_or_build_data(args, cp):
    tr_path, te_path = _out(args, "train.npz"), _out(args, "test.npz")
    if os.path.exists(tr_path) and os.path.exists(te_path):
        return load_dataset(tr_path), load_dataset(te_path)
    return build_data(cp)


def _need(path, what):
    if not os.path.exists(path):
        raise CliError("data", f"{what} not found at {path}; run the earlier stage first")
    return path


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---- commands ---------------------------------------------------------------

def cmd_gen_data(args, cp):
    tr, te = build_data(cp)
    save_dataset(tr, _out(args, "train.npz"))
    save_dataset(te, _out(args, "test.npz"))
    emit({"command": "gen-data", "train": len(tr), "test": len(te), "d": tr.d,
          "train_digest": tr.digest(), "test_digest": te.digest(),
          "provenance": tr.provenance})
    return 0


def cmd_train(args, cp):
    tr, te = _load_or_build_data(args, cp)
    cfg = build_pipeline(cp, args.workers)
    model = train(init_model(tr.d, hidden=cfg.hidden, loss_kind=cfg.loss_kind,
                             n_classes=cfg.n_classes, seed=cfg.seed_model), tr, cfg.opt)
    save_model(model, _out(args, "source.npz"))
    emit({"command": "train", "train_acc": accuracy(model, tr), "test_acc": accuracy(model, te),
          "final_loss": model.trace[-1] if model.trace else None, "seed": cfg.seed_model,
          "config_hash": config_hash(cfg, tr.digest())})
    return 0


def cmd_perturb(args, cp):
    tr, _ = _load_or_build_data(args, cp)
    cfg = build_pipeline(cp, args.workers)
    source = load_model(_need(_out(args, "source.npz"), "source model"))
    if cfg.n_adv is not None:
        tr = tr.subset(np.arange(min(cfg.n_adv, len(tr))))
    targets = assign_targets(tr.y, cfg.target_mode, cfg.n_classes, seed=cfg.seed_targets)
    spec = cfg.perturb
    if spec.kind == "noise":
        spec = replace(spec, seed=cfg.seed_perturb)
    est = None
    if spec.kind == "pcfe" and spec.tau:
        est = fit_density(tr, cfg.density)
        save_estimator(est, _out(args, "density.npz"))
    pert = build_perturbed_dataset(source, tr, targets.targets, spec, est,
                                   workers=args.workers, keep=cfg.keep)
    full = tr.X.copy()
    full[pert.index] = pert.dataset.X
    P.save_perturbed(_out(args, "perturbed.npz"), pert.index, targets.targets, tr.X, full,
                     pert.valid, spec)
    emit({"command": "perturb", "method": spec.kind, "n": len(pert.dataset),
          "validity_rate": pert.validity_rate, "sizes": pert.stats(),
          "seeds": {"targets": cfg.seed_targets, "perturb": cfg.seed_perturb},
          "config_hash": config_hash(cfg, tr.digest())})
    return 0


def cmd_relearn(args, cp):
    tr, te = _load_or_build_data(args, cp)
    cfg = build_pipeline(cp, args.workers)
    dump = P.load_perturbed(_need(_out(args, "perturbed.npz"), "perturbed dataset"))
    idx = dump["index"]
    base = tr.subset(np.arange(len(dump["x"])))
    pert = base.subset(idx).with_features(dump["x"][idx], dump["target"][idx])
    opt = cfg.relearn_opt or cfg.opt
    mk = lambda: init_model(tr.d, hidden=cfg.hidden, loss_kind=cfg.loss_kind,
                            n_classes=cfg.n_classes, seed=cfg.seed_relearn)
    relearned = train(mk(), pert, opt)
    save_model(relearned, _out(args, "relearned.npz"))
    out = {"command": "relearn", "fit_acc": accuracy(relearned, pert),
           "train_acc": accuracy(relearned, tr), "test_acc": accuracy(relearned, te),
           "seed": cfg.seed_relearn, "config_hash": config_hash(cfg, tr.digest())}
    if cfg.noise:
        source = load_model(_need(_out(args, "source.npz"), "source model"))
        spec = P.spec_from_dict(dump["meta"]["spec"])
        sizes = {k: dump[k] for k in ("l0", "l2", "linf")}
        nspec = matched_noise(spec, SimpleNamespace(sizes=sizes), cfg.seed_perturb)
        npert = build_perturbed_dataset(source, base, dump["target"], nspec,
                                        workers=args.workers)
        labels = dump["target"] if cfg.noise_labels == "target" else base.y
        noise_model = train(mk(), npert.dataset.with_features(npert.dataset.X, labels), opt)
        save_model(noise_model, _out(args, "noise_relearned.npz"))
        out.update(noise_train_acc=accuracy(noise_model, tr),
                   noise_test_acc=accuracy(noise_model, te), noise_spec=nspec.__dict__)
    emit(out)
    return 0


def cmd_eval(args, cp):
    tr, te = _load_or_build_data(args, cp)
    found = 0
    for name in ("source", "relearned", "noise_relearned"):
        path = _out(args, f"{name}.npz")
        if not os.path.exists(path):
            continue
        found += 1
        m = load_model(path)
        out = {"command": "eval", "model": name, "train_acc": accuracy(m, tr),
               "test_acc": accuracy(m, te)}
        if te.groups is not None:
            out["train_groups"] = group_report(m, tr, require_all=False).as_dict()
            out["test_groups"] = group_report(m, te, require_all=False).as_dict()
        emit(out)
    if not found:
        raise CliError("data", f"no trained models under {args.out}")
    return 0


def _apply_axis(cp, axis, value):
    target = AXIS_ALIASES.get(axis, axis)
    section, _, key = target.partition(".")
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise CliError("config", f"cannot sweep over {axis!r}")
    kind = SCHEMA[section][key]
    if kind is _I and float(value) != int(float(value)):
        raise CliError("config", f"{axis} needs integer grid values")
    text = str(int(float(value))) if kind is _I else repr(float(value))
    if not cp.has_section(section):
        cp.add_section(section)
    cp.set(section, key, text)
    return target


def _axis_text(value):
    v = float(value)
    return str(int(v)) if v.is_integer() else repr(v)


def _clone(cp):
    buf = io.StringIO()
    cp.write(buf)
    out = configparser.ConfigParser(interpolation=None)
    out.optionxform = str
    out.read_string(buf.getvalue())
    return out


def _config_text(cp):
    buf = io.StringIO()
    for section in sorted(cp.sections()):
        buf.write(f"[{section}]\n")
        for k in sorted(cp[section]):
            buf.write(f"{k}={cp.get(section, k)}\n")
    return buf.getvalue()


def cmd_sweep(args, cp):
    s = _section(cp, "sweep")
    axis = s.get("axis")
    if not axis or not s.get("grid"):
        raise CliError("config", "[sweep] needs axis and grid")
    grid = _floats(s["grid"])
    reps = s.get("reps") or 1
    base_seed = s.get("seed") or 0
    path = _out(args, s.get("file") or "sweep.csv")
    chash = config_hash(_config_text(cp))
    header = [axis, *SWEEP_COLUMNS]

    rows = _read_existing(path, header, chash)
    _write_sidecar(path, chash, cp, axis, grid, reps, base_seed)
    failures = 0
    for value in grid:
        for rep in range(reps):
            key = (_axis_text(value), str(rep))
            if key in rows and rows[key][-1] == "":
                continue
            seed = base_seed + rep
            point = _clone(cp)
            _apply_axis(point, axis, value)
            if not point.has_section("data"):
                point.add_section("data")
            point.set("data", "seed", str(seed))
            try:
                tr, te = build_data(point)
                cfg = build_pipeline(point, args.workers)
                cfg = replace(cfg, seed_model=cfg.seed_model + 100 * seed,
                              seed_targets=cfg.seed_targets + 100 * seed,
                              seed_perturb=cfg.seed_perturb + 100 * seed,
                              seed_relearn=cfg.seed_relearn + 100 * seed)
                res = learn_from_perturbations(tr, te, cfg)
                rows[key] = [key[0], _fmt(res.test_acc), _fmt(res.noise_test_acc), key[1],
                             str(seed), ""]
                emit({"command": "sweep", axis: float(value), "rep": rep, "seed": seed,
                      "adv_acc_for_natural": res.test_acc,
                      "noise_acc_for_natural": res.noise_test_acc,
                      "validity_rate": res.validity_rate})
            except (CliError, ValueError, FloatingPointError, RuntimeError) as exc:
                failures += 1
                msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
                rows[key] = [key[0], "nan", "nan", key[1], str(seed), msg]
                emit({"command": "sweep", axis: float(value), "rep": rep, "seed": seed,
                      "error": _category(exc), "message": msg})
            _write_sweep(path, header, grid, reps, rows)
    emit({"command": "sweep", "file": path, "points": len(grid) * reps, "failures": failures,
          "config_hash": chash})
    if failures:
        raise CliError("partial", f"{failures} sweep point(s) failed; see {path}")
    return 0


def _read_existing(path, header, chash):
    """Rows of an earlier run of the same configuration, keyed by (axis, rep)."""
    side = path + ".meta.json"
    if not (os.path.exists(path) and os.path.exists(side)):
        return {}
    with open(side) as fh:
        if json.load(fh).get("config_hash") != chash:
            return {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or head[:len(header)] != header:
            return {}
        out = {}
        for row in reader:
            row = row + [""] * (len(header) + 1 - len(row))
            out[(row[0], row[3])] = row[:len(header) + 1]
    return out


def _write_sweep(path, header, grid, reps, rows):
    has_error = any(r[-1] for r in rows.values())
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header + (["error"] if has_error else []))
        for value in grid:
            for rep in range(reps):
                row = rows.get((_axis_text(value), str(rep)))
                if row is not None:
                    w.writerow(row if has_error else row[:-1])
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _write_sidecar(path, chash, cp, axis, grid, reps, base_seed):
    meta = {"config_hash": chash, "axis": axis, "grid": grid, "reps": reps,
            "seeds": [base_seed + r for r in range(reps)], "version": __version__,
            "config": {s: dict(cp[s]) for s in sorted(cp.sections())}}
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def run_spurious_bench(cp, workers=1):
    """Per-method and per-seed results on the grouped benchmark."""
    b = _section(cp, "bench")
    methods = [m.strip() for m in (b.get("methods") or ",".join(BENCH_METHODS)).split(",")
               if m.strip()]
    for m in methods:
        if m not in BENCH_METHODS:
            raise CliError("config", f"unknown benchmark method {m!r}")
    seeds = [int(v) for v in _floats(b.get("seeds") or "0,1,2")]
    if not cp.has_section("data"):
        cp.add_section("data")
    if not cp.has_option("data", "generator"):
        cp.set("data", "generator", "spurious")
    results = {m: [] for m in methods}
    for seed in seeds:
        point = _clone(cp)
        point.set("data", "seed", str(seed))
        tr, te = build_data(point)
        base = build_pipeline(point, workers, spec=P.PgdSpec())
        base = replace(base, seed_model=base.seed_model + 100 * seed,
                       seed_targets=base.seed_targets + 100 * seed,
                       seed_perturb=base.seed_perturb + 100 * seed,
                       seed_relearn=base.seed_relearn + 100 * seed, noise=False)
        source = train(init_model(tr.d, hidden=base.hidden, loss_kind=base.loss_kind,
                                  n_classes=base.n_classes, seed=base.seed_model), tr, base.opt)
        for m in methods:
            if m == "original":
                model = source
            else:
                spec = build_spec(point, m if point.has_section(m) else "perturb", method=m)
                model = learn_from_perturbations(tr, te, replace(base, perturb=spec),
                                                 source=source).relearned
            for split_name, data in (("train", tr), ("test", te)):
                rep = group_report(model, data, require_all=False)
                results[m].append({"seed": seed, "split": split_name, "acc": rep.overall,
                                   "wga": rep.worst})
    return results


def cmd_spurious_bench(args, cp):
    results = run_spurious_bench(cp, args.workers)
    path = _out(args, _section(cp, "bench").get("file") or "spurious_bench.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "split", "acc", "wga", "std"])
        for m, rows in results.items():
            for split_name in ("train", "test"):
                sel = [r for r in rows if r["split"] == split_name]
                acc = np.array([r["acc"] for r in sel])
                wga = np.array([r["wga"] for r in sel])
                w.writerow([m, split_name, _fmt(float(acc.mean())), _fmt(float(wga.mean())),
                            _fmt(float(wga.std()))])
                emit({"command": "spurious-bench", "method": m, "split": split_name,
                      "acc": float(acc.mean()), "acc_std": float(acc.std()),
                      "wga": float(wga.mean()), "std": float(wga.std()),
                      "seeds": [r["seed"] for r in sel]})
    chash = config_hash(_config_text(cp))
    with open(path + ".meta.json", "w") as fh:
        json.dump({"config_hash": chash, "version": __version__,
                   "config": {s: dict(cp[s]) for s in sorted(cp.sections())}}, fh, indent=1,
                  sort_keys=True)
    emit({"command": "spurious-bench", "file": path, "config_hash": chash})
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "perturb": cmd_perturb,
            "relearn": cmd_relearn, "eval": cmd_eval, "sweep": cmd_sweep,
            "spurious-bench": cmd_spurious_bench}


def _category(exc):
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, GenerationError):
        return "generation"
    if isinstance(exc, (NonFiniteError, GMMDegenerateError, FloatingPointError)):
        return "numerical"
    if isinstance(exc, (IdxFormatError, OSError)):
        return "data"
    if isinstance(exc, (ValueError, TypeError, KeyError)):
        return "config"
    return "internal"


def parser():
    p = argparse.ArgumentParser(prog="perturb-learn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.workers < 1:
            raise CliError("config", "--workers must be >= 1")
        cp = load_config(args.config, args.set)
        return HANDLERS[args.command](args, cp)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit category
        cat = _category(exc)
        sys.stderr.write(json.dumps({"error": cat, "type": type(exc).__name__,
                                     "message": str(exc)}) + "\n")
        if cat == "internal":
            log.exception("unexpected failure")
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
