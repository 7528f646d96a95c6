import csv
import json

import numpy as np
import pytest

from perturb_learn import cli
from perturb_learn.data import write_idx
from perturb_learn.model import init_model

BASE = """
[data]
generator = synthetic
d = 10
N = 200
eta = 0.3
sigma = 0.15
n_test = 200
[train]
lr = 0.1
batch_size = 50
epochs = 3
[perturb]
method = pgd_l2
eps = 0.5
steps = 10
"""


@pytest.fixture
def config(tmp_path):
    def make(extra=""):
        path = tmp_path / "run.ini"
        path.write_text(BASE + extra)
        return str(path)
    return make


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    lines = [json.loads(l) for l in out.splitlines() if l.strip()]
    return code, lines, err


def _error(err):
    return json.loads(err.strip().splitlines()[-1])


# ---- config handling --------------------------------------------------------

def test_set_overrides_file(config):
    cp = cli.load_config(config(), ["perturb.eps=0.25", "density.K=3"])
    spec = cli.build_spec(cp)
    assert spec.eps == 0.25 and spec.kind == "pgd"
    assert cli.build_pipeline(cp).density.K == 3


@pytest.mark.parametrize("sets, needle", [
    (["data.bogus=1"], "unknown key"),
    (["nosuch.key=1"], "unknown config section"),
    (["data.d=ten"], "d"),
    (["noequals"], "section.key=value"),
])
def test_config_errors_exit_with_config_category(config, capsys, sets, needle):
    argv = ["train", "--config", config()]
    for s in sets:
        argv += ["--set", s]
    code, _, err = _run(capsys, *argv)
    assert code == cli.EXIT_CODES["config"]
    e = _error(err)
    assert e["error"] == "config" and needle in e["message"]


def test_missing_config_file(capsys, tmp_path):
    code, _, err = _run(capsys, "train", "--config", str(tmp_path / "nope.ini"))
    assert code == 2 and _error(err)["error"] == "config"


def test_unknown_method_is_config_error(config, capsys, tmp_path):
    code, _, err = _run(capsys, "train", "--config", config(), "--set", "perturb.method=fgsm",
                        "--out", str(tmp_path))
    assert code == 2 and "fgsm" in _error(err)["message"]


def test_missing_idx_file_is_data_error(config, capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("PERTURB_LEARN_DATA_DIR", str(tmp_path))
    code, _, err = _run(capsys, "gen-data", "--config", config(), "--set", "data.generator=idx",
                        "--set", "data.images=missing", "--set", "data.labels=missing",
                        "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_CODES["data"] and _error(err)["error"] == "data"


def test_stage_without_predecessor_is_data_error(config, capsys, tmp_path):
    code, _, err = _run(capsys, "relearn", "--config", config(), "--out", str(tmp_path))
    assert code == 3 and "perturbed" in _error(err)["message"]


def test_idx_generator(config, capsys, tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    write_idx(rng.integers(0, 256, (40, 3, 3), dtype=np.uint8), rng.integers(0, 3, 40),
              tmp_path / "img", tmp_path / "lab")
    monkeypatch.setenv("PERTURB_LEARN_DATA_DIR", str(tmp_path))
    code, lines, _ = _run(capsys, "gen-data", "--config", config(), "--set",
                          "data.generator=idx", "--set", "data.images=img", "--set",
                          "data.labels=lab", "--set", "data.test_fraction=0.25",
                          "--out", str(tmp_path / "o"))
    assert code == 0
    assert lines[0]["train"] == 30 and lines[0]["test"] == 10 and lines[0]["d"] == 9


# ---- staged commands --------------------------------------------------------

def test_stages_chain_and_match_pipeline(config, capsys, tmp_path):
    out = str(tmp_path / "run")
    summaries = {}
    for cmd in ("gen-data", "train", "perturb", "relearn"):
        code, lines, err = _run(capsys, cmd, "--config", config(), "--out", out)
        assert code == 0, err
        summaries[cmd] = lines[-1]
    code, evals, _ = _run(capsys, "eval", "--config", config(), "--out", out)
    assert code == 0 and [e["model"] for e in evals] == ["source", "relearned", "noise_relearned"]

    from perturb_learn.protocol import learn_from_perturbations
    cp = cli.load_config(config())
    tr, te = cli.build_data(cp)
    res = learn_from_perturbations(tr, te, cli.build_pipeline(cp))
    assert summaries["relearn"]["test_acc"] == res.test_acc
    assert summaries["relearn"]["noise_test_acc"] == res.noise_test_acc
    assert summaries["perturb"]["validity_rate"] == res.validity_rate
    assert evals[1]["test_acc"] == res.test_acc


# ---- sweep ------------------------------------------------------------------

SWEEP = """
[sweep]
axis = eps
grid = 0.2, 0.6
reps = 2
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_sweep_schema_and_sidecar(config, capsys, tmp_path):
    code, lines, _ = _run(capsys, "sweep", "--config", config(SWEEP), "--out", str(tmp_path))
    assert code == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert rows[0] == ["eps", "adv_acc_for_natural", "noise_acc_for_natural", "rep", "seed"]
    assert [(r[0], r[3], r[4]) for r in rows[1:]] == [("0.2", "0", "0"), ("0.2", "1", "1"),
                                                      ("0.6", "0", "0"), ("0.6", "1", "1")]
    assert all(0 <= float(v) <= 1 for r in rows[1:] for v in r[1:3])
    meta = json.loads((tmp_path / "sweep.csv.meta.json").read_text())
    assert meta["seeds"] == [0, 1] and meta["grid"] == [0.2, 0.6]
    assert meta["config_hash"] == lines[-1]["config_hash"]


def test_sweep_resume_skips_completed_rows(config, capsys, tmp_path, monkeypatch):
    assert cli.main(["sweep", "--config", config(SWEEP), "--out", str(tmp_path)]) == 0
    full = (tmp_path / "sweep.csv").read_bytes()
    # drop the last row, then count how many points the rerun computes
    lines = full.decode().splitlines(keepends=True)
    (tmp_path / "sweep.csv").write_text("".join(lines[:-1]))
    calls = []
    real = cli.learn_from_perturbations
    monkeypatch.setattr(cli, "learn_from_perturbations",
                        lambda *a, **k: calls.append(1) or real(*a, **k))
    capsys.readouterr()
    assert cli.main(["sweep", "--config", config(SWEEP), "--out", str(tmp_path)]) == 0
    assert len(calls) == 1
    assert (tmp_path / "sweep.csv").read_bytes() == full


def test_sweep_config_change_invalidates_resume(config, capsys, tmp_path):
    assert cli.main(["sweep", "--config", config(SWEEP), "--out", str(tmp_path)]) == 0
    first = _rows(tmp_path / "sweep.csv")
    assert cli.main(["sweep", "--config", config(SWEEP), "--set", "train.epochs=1",
                     "--out", str(tmp_path)]) == 0
    assert _rows(tmp_path / "sweep.csv") != first


def test_sweep_failure_adds_error_column(config, capsys, tmp_path):
    code, _, err = _run(capsys, "sweep", "--config", config(SWEEP), "--set",
                        "sweep.grid=0.2,-1", "--set", "sweep.reps=1", "--out", str(tmp_path))
    assert code == cli.EXIT_CODES["partial"] and _error(err)["error"] == "partial"
    rows = _rows(tmp_path / "sweep.csv")
    assert rows[0][-1] == "error"
    assert rows[1][-1] == "" and rows[1][0] == "0.2"
    assert rows[2][0] == "-1" and rows[2][1] == "nan" and "eps" in rows[2][-1]


def test_sweep_generic_axis_and_integer_check(config, capsys, tmp_path):
    extra = "[sweep]\naxis = data.d\ngrid = 5, 8\n"
    code, lines, _ = _run(capsys, "sweep", "--config", config(extra), "--out", str(tmp_path))
    assert code == 0 and _rows(tmp_path / "sweep.csv")[0][0] == "data.d"
    extra = "[sweep]\naxis = d\ngrid = 5.5\n"
    code, _, err = _run(capsys, "sweep", "--config", config(extra), "--out",
                        str(tmp_path / "x"))
    assert code != 0 and "integer" in err


def test_sweep_n_adv_axis(config, capsys, tmp_path):
    extra = "[sweep]\naxis = N_adv\ngrid = 50, 200\n"
    code, lines, _ = _run(capsys, "sweep", "--config", config(extra), "--out", str(tmp_path))
    assert code == 0
    assert [l["N_adv"] for l in lines[:-1]] == [50.0, 200.0]


# ---- spurious benchmark ------------------------------------------------------

def test_spurious_bench_schema(capsys, tmp_path):
    ini = tmp_path / "b.ini"
    ini.write_text("[data]\nN = 400\nd_spur = 20\nn_test = 400\n[train]\nepochs = 2\n"
                   "[bench]\nmethods = original, pgd_l2\nseeds = 0, 1\n[pgd_l2]\neps = 1.0\n"
                   "steps = 10\n")
    code, lines, _ = _run(capsys, "spurious-bench", "--config", str(ini), "--out", str(tmp_path))
    assert code == 0
    rows = _rows(tmp_path / "spurious_bench.csv")
    assert rows[0] == ["method", "split", "acc", "wga", "std"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("original", "train"), ("original", "test"),
                                                ("pgd_l2", "train"), ("pgd_l2", "test")]
    for r in rows[1:]:
        assert float(r[3]) <= float(r[2]) + 1e-12 and float(r[4]) >= 0
    assert all(l["seeds"] == [0, 1] for l in lines[:-1])
    assert {"acc_std", "std", "wga", "acc"} <= set(lines[0])


def test_spurious_bench_rejects_unknown_method(capsys, tmp_path):
    ini = tmp_path / "b.ini"
    ini.write_text("[bench]\nmethods = original, dro\n")
    code, _, err = _run(capsys, "spurious-bench", "--config", str(ini), "--out", str(tmp_path))
    assert code == 2 and "dro" in err


def test_shipped_configs_parse():
    from pathlib import Path
    for path in sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.ini")):
        cfg = cli.build_pipeline(cli.load_config(str(path)))
        init_model(4, hidden=cfg.hidden, loss_kind=cfg.loss_kind, n_classes=cfg.n_classes)
