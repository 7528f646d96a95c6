import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from perturb_learn import perturb as P
from perturb_learn.data import Dataset, SyntheticSpec, gen_synthetic
from perturb_learn.model import init_model, train
from perturb_learn.numerics import OptimConfig
from perturb_learn.protocol import (DensityConfig, GenerationError, PipelineConfig,
                                    assign_targets, build_perturbed_dataset, config_hash,
                                    fit_density, learn_from_perturbations, matched_noise)


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(SyntheticSpec(d=20, N=600, eta=0.3, sigma=0.15, seed=0, n_test=300))


@pytest.fixture(scope="module")
def source(small):
    return train(init_model(20, seed=1), small[0], OptimConfig(lr=0.1, epochs=5, batch_size=50))


# ---- targets ----------------------------------------------------------------

def test_binary_targets_flip():
    y = np.array([1, -1, -1, 1])
    assert np.array_equal(assign_targets(y, "random").targets, -y)
    assert np.array_equal(assign_targets(y, "deterministic").targets, -y)


def test_deterministic_targets():
    y = np.array([0, 1, 2, 9])
    assert np.array_equal(assign_targets(y, "deterministic", 10).targets, [1, 2, 3, 0])


def test_random_targets_uniform_over_other_classes():
    C, n = 5, 50_000
    y = np.full(n, 2)
    t = assign_targets(y, "random", C, seed=3).targets
    assert np.all(t != y)
    counts = np.bincount(t, minlength=C)[[0, 1, 3, 4]]
    assert chisquare(counts).pvalue > 1e-3


def test_random_targets_seeded():
    y = np.arange(100) % 4
    a = assign_targets(y, "random", 4, seed=7).targets
    assert np.array_equal(a, assign_targets(y, "random", 4, seed=7).targets)
    assert not np.array_equal(a, assign_targets(y, "random", 4, seed=8).targets)


@pytest.mark.parametrize("args", [(np.array([0, 1]), "random", 1),
                                  (np.array([0, 1]), "cyclic", 2),
                                  (np.array([0, 5]), "random", 3)])
def test_target_errors(args):
    with pytest.raises(ValueError):
        assign_targets(*args)


# ---- perturbed dataset ------------------------------------------------------

@pytest.mark.parametrize("spec", [P.PgdSpec("l2", 0.3, steps=10),
                                  P.NoiseSpec("l0", 3, seed=5),
                                  P.PcfeSpec(gamma=50.0, tau=0.5, beta=0.5, iterations=10,
                                             log_density=True)])
def test_worker_count_does_not_change_result(small, source, spec):
    tr = small[0]
    est = fit_density(tr, DensityConfig("gmm"))
    t = -tr.y
    a = build_perturbed_dataset(source, tr, t, spec, est, workers=1, chunk_size=64)
    b = build_perturbed_dataset(source, tr, t, spec, est, workers=8, chunk_size=64)
    assert a.dataset.X.tobytes() == b.dataset.X.tobytes()
    assert np.array_equal(a.valid, b.valid)


def test_keep_valid_filters(small, source):
    tr = small[0]
    spec = P.PgdSpec("l2", 0.05, steps=10)
    full = build_perturbed_dataset(source, tr, -tr.y, spec)
    kept = build_perturbed_dataset(source, tr, -tr.y, spec, keep="valid")
    assert len(full.dataset) == len(tr)
    assert len(kept.dataset) == int(full.valid.sum()) < len(tr)
    assert np.array_equal(kept.index, np.flatnonzero(full.valid))
    assert np.array_equal(kept.dataset.y, -tr.y[kept.index])


def test_generation_error_names_sample():
    X = np.zeros((5, 2))
    X[3] = [5.0, 0.0]  # outside the p-CFE box
    ds = Dataset(X, np.ones(5, int))
    with pytest.raises(GenerationError) as info:
        build_perturbed_dataset(init_model(2), ds, -np.ones(5, int),
                                P.PcfeSpec(box=1.0, iterations=3))
    assert info.value.index == 3


def test_pcfe_with_tau_requires_density(small, source):
    with pytest.raises(ValueError):
        build_perturbed_dataset(source, small[0], -small[0].y, P.PcfeSpec(tau=1.0))


def test_matched_noise_budgets(small, source):
    tr = small[0]
    assert matched_noise(P.PgdSpec("linf", 0.03), None, 1) == P.NoiseSpec("linf", 0.03, 1)
    pert = build_perturbed_dataset(source, tr, -tr.y, P.CfeSpec(iterations=20))
    ns = matched_noise(pert.spec, pert, 2)
    assert ns.norm == "l2" and ns.magnitude == pytest.approx(np.mean(pert.sizes["l2"]))
    pert = build_perturbed_dataset(source, tr, -tr.y, P.PcfeSpec(gamma=50, beta=0.5,
                                                                  iterations=10))
    ns = matched_noise(pert.spec, pert, 2)
    assert ns.norm == "l0" and ns.magnitude == np.round(np.mean(pert.sizes["l0"]))


# ---- pipeline ---------------------------------------------------------------

OPT = OptimConfig(lr=0.1, epochs=5, batch_size=50, seed=0)


def test_eps_zero_label_flip(small):
    tr, te = small
    cfg = PipelineConfig(perturb=P.PgdSpec("l2", 0.0), opt=replace(OPT, epochs=30), noise=False)
    res = learn_from_perturbations(tr, te, cfg)
    assert res.relearn_fit_acc >= 0.9
    assert res.train_acc <= 0.1


def test_relearn_with_no_epochs_is_initialisation(small):
    tr, te = small
    cfg = PipelineConfig(perturb=P.PgdSpec("l2", 0.5), opt=OPT,
                         relearn_opt=replace(OPT, epochs=0), seed_relearn=9, noise=False)
    res = learn_from_perturbations(tr, te, cfg)
    init = init_model(20, seed=9)
    assert all(np.array_equal(p, q) for p, q in zip(res.relearned.params, init.params))


def test_pipeline_reproducible_and_resumable(small, tmp_path):
    tr, te = small
    cfg = PipelineConfig(perturb=P.PgdSpec("l2", 0.5, steps=20), opt=OPT)
    a = learn_from_perturbations(tr, te, cfg, artifacts_dir=tmp_path / "run")
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(cfg, tr.digest(), te.digest())
    assert {"source.npz", "perturbed.npz", "relearned.npz",
            "noise_relearned.npz"} <= set(manifest["artifacts"])
    b = learn_from_perturbations(tr, te, cfg, artifacts_dir=tmp_path / "run")
    c = learn_from_perturbations(tr, te, cfg)
    assert a.summary() == b.summary() == c.summary()
    # a different config must not reuse stale artifacts
    d = learn_from_perturbations(tr, te, replace(cfg, seed_relearn=11),
                                 artifacts_dir=tmp_path / "run")
    assert d.test_acc != a.test_acc or d.relearned.params[0].tobytes() != \
        a.relearned.params[0].tobytes()


def test_pipeline_summary_fields(small):
    tr, te = small
    res = learn_from_perturbations(tr, te, PipelineConfig(perturb=P.PgdSpec("l2", 0.5), opt=OPT))
    s = res.summary()
    for key in ("train_acc", "test_acc", "noise_test_acc", "validity_rate", "perturbation"):
        assert key in s
    assert 0 <= s["validity_rate"] <= 1


def test_config_hash_sensitivity():
    a = PipelineConfig()
    assert config_hash(a) == config_hash(PipelineConfig())
    assert config_hash(a) != config_hash(replace(a, seed_model=99))
    assert config_hash(a) != config_hash(replace(a, perturb=P.PgdSpec("linf")))


def test_n_adv_limits_perturbed_rows(small):
    tr, te = small
    cfg = PipelineConfig(perturb=P.PgdSpec("l2", 0.5, steps=10), opt=OPT, n_adv=100)
    res = learn_from_perturbations(tr, te, cfg)
    assert len(res.perturbed.dataset) == 100
    assert np.array_equal(res.perturbed.index, np.arange(100))
    with pytest.raises(ValueError):
        learn_from_perturbations(tr, te, replace(cfg, n_adv=0))
