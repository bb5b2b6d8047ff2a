import csv
import json

import numpy as np
import pytest

from mfgpcox import cli
from mfgpcox.model import MFGPCox
from mfgpcox.simulate import load_truth

SMALL_TOML = """
seed = 7
[simulate]
n_train = 8
n_test = 3
[fit]
n_inducing = 10
n_restarts = 1
max_iter = 60
n_mc = 16
vi_max_iter = 300
[predict]
n_mc = 100
grid = 50
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL_TOML)
    c = ["--config", cfg]
    assert run("simulate", *c, "--out", root / "data") == 0
    assert run("fit", *c, "--data", root / "data", "--out", root / "model") == 0
    assert run("predict", *c, "--model", root / "model", "--data", root / "data", "--out", root / "pred") == 0
    assert run("evaluate", *c, "--predictions", root / "pred", "--truth", root / "data" / "truth.json",
               "--out", root / "eval") == 0
    return root


# --- configuration ---------------------------------------------------------------------


@pytest.mark.parametrize("text, field", [
    ("[fit]\nn_inducing = 1\n", "fit.n_inducing"),
    ("[fit]\nn_inducing = 'ten'\n", "fit.n_inducing"),
    ("[fit]\nbogus = 1\n", "fit.bogus"),
    ("[predict]\nband_level = 1.5\n", "predict.band_level"),
    ("[simulate]\nt_max = 5.0\n", "t_max"),
    ("[fit.priors]\nalpha = -1.0\n", "fit.priors"),
    ("nonsense = 3\n", "nonsense"),
    ("seed = [\n", "small.toml"),
])
def test_config_errors_exit_2_without_output(tmp_path, capsys, text, field):
    cfg = tmp_path / "small.toml"
    cfg.write_text(text)
    out = tmp_path / "out"
    assert run("simulate", "--config", cfg, "--out", out) == 2
    assert field in capsys.readouterr().err
    assert not out.exists()


def test_missing_config_and_bad_threads(tmp_path):
    assert run("simulate", "--config", tmp_path / "none.toml", "--out", tmp_path / "o") == 2
    assert run("simulate", "--threads", "0", "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_default_config_file_matches_builtin():
    from pathlib import Path
    path = Path(__file__).parents[1] / "configs" / "default.toml"
    import inspect
    from mfgpcox.inference import Priors
    a, b = cli.load_run_config(path), cli.load_run_config()
    assert a.sim_config() == b.sim_config()
    assert (a.seed, a.paths, a.predict) == (b.seed, b.paths, b.predict)
    prior_defaults = {k: v.default for k, v in inspect.signature(Priors.default).parameters.items()
                      if k in cli.PRIOR_KEYS}
    assert a.fit.priors == prior_defaults
    a.fit.priors = {}
    assert a.fit == b.fit


def test_seed_flag_overrides_config(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 3\n")
    assert cli.load_run_config(cfg, seed=11).seed == 11
    assert cli.load_run_config(cfg).seed == 3


def test_path_precedence(monkeypatch):
    cfg = cli.load_run_config()
    monkeypatch.delenv("MFGPCOX_DATA_DIR", raising=False)
    assert str(cli.resolve_path(cfg, "data_dir")) == "data"
    monkeypatch.setenv("MFGPCOX_DATA_DIR", "/env/data")
    assert str(cli.resolve_path(cfg, "data_dir")) == "/env/data"
    assert str(cli.resolve_path(cfg, "data_dir", "/flag")) == "/flag"


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL_TOML)
    target = tmp_path / "deep" / "nested" / "data"
    monkeypatch.setenv("MFGPCOX_DATA_DIR", str(target))
    assert run("simulate", "--config", cfg) == 0
    assert (target / "train" / "units.csv").is_file()
    assert (target / "manifest.json").is_file()


# --- end to end --------------------------------------------------------------------------


def test_outputs_and_manifests(study):
    for d in ("data", "model", "pred", "eval"):
        man = json.loads((study / d / "manifest.json").read_text())
        assert len(man["config_sha256"]) == 64 and man["seed"] == 7
        for name, digest in man["outputs"].items():
            import hashlib
            assert hashlib.sha256((study / d / name).read_bytes()).hexdigest() == digest
    assert not list(study.glob(".stage-*"))


def test_prediction_rows(study):
    summary = json.loads((study / "pred" / "predictions_t50.json").read_text())
    rows = read_rows(study / "pred" / "predictions_t50.csv")
    assert len(rows) == len(summary["units"]) * 50
    assert {"p_mode0", "p_mode1"} <= set(rows[0])
    for r in rows:
        assert float(r["lower"]) <= float(r["point"]) <= float(r["upper"])


def test_predict_skips_failed_units(study):
    units = {r["unit_id"]: r for r in read_rows(study / "data" / "test" / "t75" / "units.csv")}
    summary = json.loads((study / "pred" / "predictions_t75.json").read_text())
    failed = {u for u, r in units.items() if r["event_indicator"] == "1"}
    assert set(summary["skipped"]) == failed
    assert set(summary["units"]) == set(units) - failed


def test_metrics_files(study):
    rows = read_rows(study / "eval" / "metrics_units.csv")
    assert rows and set(rows[0]) == {"unit_id", "t_star", "mode_error", "rul_abs_error", "coverage"}
    summary = json.loads((study / "eval" / "metrics_summary.json").read_text())
    assert set(summary) == {"t20", "t50", "t75", "all"}
    assert summary["all"]["mode_error"]["n"] == len(rows)


def test_rerun_is_byte_identical(study, tmp_path):
    c = ["--config", study / "small.toml"]
    assert run("predict", *c, "--threads", "2", "--model", study / "model", "--data", study / "data",
               "--out", tmp_path / "pred") == 0
    for p in (study / "pred").iterdir():
        assert (tmp_path / "pred" / p.name).read_bytes() == p.read_bytes()


def test_empty_view_gives_dirichlet_mean(study, tmp_path):
    view = tmp_path / "view"
    view.mkdir()
    (view / "units.csv").write_text("unit_id,failure_mode,event_time,event_indicator\nnew,,0.0,0\n")
    (view / "signals.csv").write_text("unit_id,sensor_id,time,value\n")
    assert run("predict", "--config", study / "small.toml", "--model", study / "model", "--data", view,
               "--t-star", "0", "--out", tmp_path / "pred") == 0
    est = MFGPCox.from_json((study / "model" / "model.json").read_text())
    alpha = np.asarray(est.state_.alpha_tilde)
    probs = json.loads((tmp_path / "pred" / "predictions_t0.json").read_text())["units"]["new"]["mode_probs"]
    np.testing.assert_allclose(probs, alpha / alpha.sum(), rtol=1e-12)


def test_fit_names_absent_mode(study, tmp_path, capsys):
    # relabel three units as modes 1, 1 and 2 so mode 0 has no training units
    train = tmp_path / "train"
    train.mkdir()
    rows = read_rows(study / "data" / "train" / "units.csv")[:3]
    for r, mode in zip(rows, ("1", "1", "2")):
        r["failure_mode"] = mode
    keep = {r["unit_id"] for r in rows}
    sig = [r for r in read_rows(study / "data" / "train" / "signals.csv") if r["unit_id"] in keep]
    for name, table in (("units.csv", rows), ("signals.csv", sig)):
        with open(train / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)
    assert run("fit", "--config", study / "small.toml", "--data", train, "--out", tmp_path / "m") == 3
    assert "failure mode 0 has no training units" in capsys.readouterr().err
    assert not (tmp_path / "m").exists()


# --- evaluate ----------------------------------------------------------------------------


def test_evaluate_lists_offenders(study, tmp_path, capsys):
    truth = json.loads((study / "data" / "truth.json").read_text())
    victim = sorted(truth["units"])[0]
    del truth["units"][victim]
    (tmp_path / "truth.json").write_text(json.dumps(truth))
    assert run("evaluate", "--config", study / "small.toml", "--predictions", study / "pred",
               "--truth", tmp_path / "truth.json", "--out", tmp_path / "eval") == 3
    assert victim in capsys.readouterr().err
    assert not (tmp_path / "eval").exists()


def test_evaluate_perfect_predictions(study, tmp_path):
    truth = load_truth(study / "data" / "truth.json")
    pred = tmp_path / "pred"
    pred.mkdir()
    for label, ts in (("t20", 20.0), ("t50", 50.0), ("t75", 75.0)):
        summary = json.loads((study / "pred" / f"predictions_{label}.json").read_text())
        for uid, info in summary["units"].items():
            k = truth.mode(uid)
            info["mode_probs"] = [float(i == k) for i in range(len(info["mode_probs"]))]
            info["rul"] = truth.rul(uid, ts)
        rows = read_rows(study / "pred" / f"predictions_{label}.csv")
        by_unit = {}
        for r in rows:
            by_unit.setdefault(r["unit_id"], []).append(r)
        for uid, rs in by_unit.items():
            S = truth.survival(uid, ts, np.array([float(r["offset"]) for r in rs]))
            for r, s in zip(rs, S):
                r["point"] = r["lower"] = r["upper"] = repr(float(s))
        (pred / f"predictions_{label}.json").write_text(json.dumps(summary))
        with open(pred / f"predictions_{label}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    assert run("evaluate", "--config", study / "small.toml", "--predictions", pred,
               "--truth", study / "data" / "truth.json") == 0
    summary = json.loads((pred / "metrics_summary.json").read_text())["all"]
    assert summary["mode_error"]["mean"] == 0.0
    assert summary["rul_abs_error"]["mean"] == 0.0
    assert summary["coverage"]["mean"] == 1.0


def test_evaluate_without_truth_config_omits_coverage(study, tmp_path):
    truth = json.loads((study / "data" / "truth.json").read_text())
    truth.pop("config")
    (tmp_path / "truth.json").write_text(json.dumps(truth))
    assert run("evaluate", "--config", study / "small.toml", "--predictions", study / "pred",
               "--truth", tmp_path / "truth.json", "--out", tmp_path / "eval") == 0
    rows = read_rows(tmp_path / "eval" / "metrics_units.csv")
    assert "coverage" not in rows[0]
    assert "coverage" not in json.loads((tmp_path / "eval" / "metrics_summary.json").read_text())["all"]


def test_missing_predictions_exit_3(study, tmp_path):
    assert run("evaluate", "--config", study / "small.toml", "--predictions", tmp_path,
               "--truth", study / "data" / "truth.json") == 3


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "mfgpcox", "simulate", "--config", tmp_path / "x.toml"],
                         capture_output=True, text=True)
    assert res.returncode == 2 and res.stderr.startswith("error [config]")
