"""Command-line driver: ``simulate``, ``fit``, ``predict`` and ``evaluate``.

Every command reads one TOML run config (``--config``; built-in defaults
otherwise), validates all inputs, then writes its outputs all-or-nothing.
Paths resolve as: command-line flag, then environment variable, then the
config's ``[paths]`` table.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, io
from ._linalg import set_jitter_ladder
from .exceptions import ConfigError, ContractError, NumericalError
from .model import Dataset, MFGPCox
from .prediction import (evaluate_metrics, load_predictions, predictions_csv,
                         predictions_summary, summarize)
from .simulate import SimConfig, dataset_files, default_config, load_truth, t_star_label

try:
    import tomllib
except ModuleNotFoundError:     # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

ENV_PATHS = {"data_dir": "MFGPCOX_DATA_DIR", "model_dir": "MFGPCOX_MODEL_DIR",
             "output_dir": "MFGPCOX_OUTPUT_DIR"}


# --- run configuration ------------------------------------------------------------------


@dataclass
class Paths:
    data_dir: str = "data"
    model_dir: str = "model"
    output_dir: str = "output"


@dataclass
class FitSection:
    n_inducing: int = 20
    approx: str = "fitc"
    n_restarts: int = 5
    max_iter: int = 500
    n_mc: int = 64
    vi_max_iter: int = 4000
    grid_steps: int = 200
    jitter_start: float = 1e-8
    jitter_max: float = 1e-2
    priors: dict = field(default_factory=dict)


@dataclass
class PredictSection:
    t_stars: list = field(default_factory=lambda: [20.0, 50.0, 75.0])
    horizon: float = 0.0          # 0 selects the automatic horizon
    n_mc: int = 500
    grid: int = 200
    band_level: float = 0.95


@dataclass
class RunConfig:
    seed: int = 2024
    paths: Paths = field(default_factory=Paths)
    simulate: dict = field(default_factory=dict)
    fit: FitSection = field(default_factory=FitSection)
    predict: PredictSection = field(default_factory=PredictSection)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def sim_config(self):
        """SimConfig from the ``[simulate]`` table over the built-in defaults."""
        base = default_config().to_dict()
        for k, v in self.simulate.items():
            if k not in base:
                raise ConfigError(f"simulate.{k}: unknown key")
            base[k] = v
        base["seed"] = self.seed
        try:
            return SimConfig.from_dict(base)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"simulate: {exc}") from None
        except ContractError as exc:
            raise ConfigError(f"simulate: {exc}") from None


PRIOR_KEYS = {"sigma_b_sq", "rho_shape", "rho_mean", "alpha"}


def _section(cls, table, name):
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    known = {f.name: f for f in fields(cls)}
    obj = cls()
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        default = getattr(obj, key)
        if isinstance(default, bool) or not isinstance(default, (int, float, str, list, dict)):
            setattr(obj, key, value)
            continue
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if type(value) is not type(default):
            raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
        setattr(obj, key, value)
    return obj


def _check_run_config(cfg):
    f, p = cfg.fit, cfg.predict
    checks = [
        (isinstance(cfg.seed, int) and cfg.seed >= 0, "seed must be a non-negative integer"),
        (f.n_inducing >= 2, "fit.n_inducing must be >= 2"),
        (f.approx in ("fitc", "dtc"), "fit.approx must be 'fitc' or 'dtc'"),
        (f.n_restarts >= 1, "fit.n_restarts must be >= 1"),
        (f.max_iter >= 1 and f.vi_max_iter >= 1, "fit.max_iter and fit.vi_max_iter must be >= 1"),
        (f.n_mc >= 1, "fit.n_mc must be >= 1"),
        (f.grid_steps >= 2, "fit.grid_steps must be >= 2"),
        (0 < f.jitter_start <= f.jitter_max, "fit.jitter_start must satisfy 0 < start <= jitter_max"),
        (set(f.priors) <= PRIOR_KEYS, f"fit.priors keys must be among {sorted(PRIOR_KEYS)}"),
        (all(isinstance(v, (int, float)) and v > 0 for v in f.priors.values()),
         "fit.priors values must be positive numbers"),
        (len(p.t_stars) >= 1 and all(isinstance(t, (int, float)) and t >= 0 for t in p.t_stars),
         "predict.t_stars must be a non-empty list of non-negative numbers"),
        (p.horizon >= 0, "predict.horizon must be >= 0 (0 = automatic)"),
        (p.n_mc >= 1, "predict.n_mc must be >= 1"),
        (p.grid >= 2, "predict.grid must be >= 2"),
        (0 < p.band_level < 1, "predict.band_level must lie in (0, 1)"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    p.t_stars = [float(t) for t in p.t_stars]
    return cfg


def load_run_config(path=None, seed=None):
    """Parse and validate a run config; ``seed`` overrides the file's value."""
    raw = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raw = copy.deepcopy(raw)
    unknown = set(raw) - {"seed", "paths", "simulate", "fit", "predict"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)!r}")
    cfg = RunConfig(
        seed=raw.get("seed", 2024),
        paths=_section(Paths, raw.get("paths", {}), "paths"),
        simulate=raw.get("simulate", {}),
        fit=_section(FitSection, raw.get("fit", {}), "fit"),
        predict=_section(PredictSection, raw.get("predict", {}), "predict"),
    )
    if seed is not None:
        cfg.seed = seed
    _check_run_config(cfg)
    cfg.sim_config()
    return cfg


def resolve_path(cfg, key, flag=None):
    if flag:
        return Path(flag)
    env = os.environ.get(ENV_PATHS[key])
    return Path(env) if env else Path(getattr(cfg.paths, key))


def _manifest(command, cfg, files, extra=None):
    out = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "outputs": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
    }
    out.update(extra or {})
    return json.dumps(out, indent=1, sort_keys=True)


def _estimator(cfg, threads):
    f, p = cfg.fit, cfg.predict
    return MFGPCox(n_inducing=f.n_inducing, approx=f.approx, n_restarts=f.n_restarts,
                   cmgp_max_iter=f.max_iter, n_mc_fit=f.n_mc, vi_max_iter=f.vi_max_iter,
                   grid_steps=f.grid_steps, n_mc_predict=p.n_mc, pred_grid=p.grid,
                   band_level=p.band_level, priors=dict(f.priors) or None,
                   random_state=cfg.seed, n_jobs=threads)


# --- commands ---------------------------------------------------------------------------


def cmd_simulate(cfg, out=None, threads=1, log=print):
    out_dir = resolve_path(cfg, "data_dir", out)
    sim = cfg.sim_config()
    train, test, files = dataset_files(sim)
    files["manifest.json"] = _manifest("simulate", cfg, files, {"n_train": len(train), "n_test": len(test)})
    io.write_files_atomic(out_dir, files)
    log(f"simulate: wrote {len(train)} training and {len(test)} test units to {out_dir}")
    return out_dir


def cmd_fit(cfg, data=None, out=None, threads=1, log=print):
    data_dir = resolve_path(cfg, "data_dir", data)
    out_dir = resolve_path(cfg, "model_dir", out)
    train = Dataset.from_dir(data_dir / "train" if (data_dir / "train").is_dir() else data_dir)
    set_jitter_ladder(cfg.fit.jitter_start, cfg.fit.jitter_max)
    est = _estimator(cfg, threads).fit(train)
    files = {"model.json": est.to_json(),
             "fit_report.json": json.dumps(est.fit_report(), indent=1, sort_keys=True)}
    files["manifest.json"] = _manifest("fit", cfg, files)
    io.write_files_atomic(out_dir, files)
    log(f"fit: {est.n_modes_ * est.n_sensors_} CMGP groups and the Cox layer written to {out_dir}")
    return out_dir


def _load_model(path):
    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    try:
        return MFGPCox.from_json(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing model file: {path}") from None


def _view_dir(data_dir, t_star):
    if (data_dir / "units.csv").is_file():
        return data_dir
    return data_dir / "test" / t_star_label(t_star)


def cmd_predict(cfg, model=None, data=None, out=None, t_stars=None, threads=1, log=print):
    est = _load_model(resolve_path(cfg, "model_dir", model))
    est.set_params(n_mc_predict=cfg.predict.n_mc, pred_grid=cfg.predict.grid,
                   band_level=cfg.predict.band_level, random_state=cfg.seed, n_jobs=threads)
    data_dir = resolve_path(cfg, "data_dir", data)
    out_dir = resolve_path(cfg, "output_dir", out)
    t_stars = [float(t) for t in (t_stars or cfg.predict.t_stars)]
    horizon = cfg.predict.horizon or None

    views = {}
    for ts in t_stars:
        view = _view_dir(data_dir, ts)
        views[ts] = Dataset.from_dir(view, est.n_sensors_)
        extra = sorted(set(views[ts].signals) - set(views[ts].units))
        if extra:
            raise ContractError(f"{view}: signals for units missing from units.csv: {extra[:5]!r}")

    files = {}
    for ts, ds in views.items():
        keep, skipped = {}, []
        for uid, rec in ds.units.items():
            if rec["event_indicator"] == 1 or rec["event_time"] < ts:
                log(f"warning: unit {uid} skipped at t*={ts:g}: its event time "
                    f"{rec['event_time']:g} does not exceed t*")
                skipped.append(uid)
            else:
                keep[uid] = rec
        results = est.predict_survival(Dataset(keep, {u: ds.signals.get(u, []) for u in keep}), ts, horizon)
        label = t_star_label(ts)
        files[f"predictions_{label}.csv"] = predictions_csv(results, est.n_modes_)
        files[f"predictions_{label}.json"] = json.dumps(predictions_summary(results, skipped),
                                                        indent=1, sort_keys=True)
        log(f"predict: t*={ts:g}: {len(results)} units, {len(skipped)} skipped")
    files["manifest.json"] = _manifest("predict", cfg, files, {"t_stars": t_stars})
    io.write_files_atomic(out_dir, files)
    return out_dir


def _truth_curves(truth, preds):
    """True survival on each prediction's grid, or None if the truth file cannot rebuild it."""
    if truth.config is None:
        return None
    return {p.unit_id: truth.survival(p.unit_id, p.t_star, p.marginal.grid) for p in preds}


def cmd_evaluate(cfg, predictions=None, truth=None, out=None, t_stars=None, threads=1, log=print):
    pred_dir = resolve_path(cfg, "output_dir", predictions)
    truth_path = Path(truth) if truth else resolve_path(cfg, "data_dir", None) / "truth.json"
    out_dir = Path(out) if out else pred_dir
    tr = load_truth(truth_path)
    t_stars = [float(t) for t in (t_stars or cfg.predict.t_stars)]

    loaded = {}
    for ts in t_stars:
        label = t_star_label(ts)
        loaded[ts] = load_predictions(pred_dir / f"predictions_{label}.csv", pred_dir / f"predictions_{label}.json")
        offenders = sorted(p.unit_id for p in loaded[ts] if p.unit_id not in tr.records
                           or tr.rul(p.unit_id, ts) is None)
        if offenders:
            raise ContractError(f"t*={ts:g}: no truth for units {offenders!r}")

    files, all_rows, summary = {}, [], {}
    for ts, preds in loaded.items():
        true_modes = {p.unit_id: tr.mode(p.unit_id) for p in preds}
        true_ruls = {p.unit_id: tr.rul(p.unit_id, ts) for p in preds}
        rows, summ = evaluate_metrics(preds, true_modes, true_ruls, _truth_curves(tr, preds))
        all_rows += rows
        summary[t_star_label(ts)] = summ
    all_rows.sort(key=lambda r: (r["t_star"], r["unit_id"]))
    summary["all"] = summarize(all_rows)

    cols = ["unit_id", "t_star", "mode_error", "rul_abs_error"] + (["coverage"] if all_rows and "coverage" in all_rows[0] else [])
    files["metrics_units.csv"] = io.to_csv(cols, [[r[c] for c in cols] for r in all_rows])
    agg_rows = [[label, metric, s["n"], s["mean"], s["q1"], s["median"], s["q3"]]
                for label, block in summary.items() for metric, s in block.items()]
    files["metrics_summary.csv"] = io.to_csv(["t_star", "metric", "n", "mean", "q1", "median", "q3"], agg_rows)
    files["metrics_summary.json"] = json.dumps(summary, indent=1, sort_keys=True)
    files["manifest.json"] = _manifest("evaluate", cfg, files)
    io.write_files_atomic(out_dir, files)
    for label, block in summary.items():
        log(f"evaluate: {label}: " + ", ".join(f"{m} mean {s['mean']:.4g}" for m, s in block.items()))
    return out_dir


# --- entry point -------------------------------------------------------------------------


def _origin(exc):
    """Name of the innermost package module the exception passed through."""
    name = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("mfgpcox."):
            name = mod.split(".", 1)[1]
    return name


def build_parser():
    parser = argparse.ArgumentParser(prog="mfgpcox", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML run config (defaults built in)")
        p.add_argument("--seed", type=int, help="global seed, overrides the config")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("simulate", help="write a synthetic dataset"))
    p = common(sub.add_parser("fit", help="fit the model on a dataset"))
    p.add_argument("--data", help="dataset directory (or its train/ subdirectory)")
    p = common(sub.add_parser("predict", help="predict test units at decision times"))
    p.add_argument("--model", help="model directory or model.json")
    p.add_argument("--data", help="dataset root or one test view directory")
    p.add_argument("--t-star", type=float, action="append", dest="t_stars", help="decision time (repeatable)")
    p = common(sub.add_parser("evaluate", help="score predictions against the truth"))
    p.add_argument("--predictions", help="directory holding predictions_*.{csv,json}")
    p.add_argument("--truth", help="truth.json")
    p.add_argument("--t-star", type=float, action="append", dest="t_stars", help="decision time (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)  # noqa: E731
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_run_config(args.config, args.seed)
        from threadpoolctl import threadpool_limits
        # single-threaded BLAS keeps floating-point results independent of --threads
        with threadpool_limits(1):
            if args.command == "simulate":
                cmd_simulate(cfg, args.out, args.threads, log)
            elif args.command == "fit":
                cmd_fit(cfg, args.data, args.out, args.threads, log)
            elif args.command == "predict":
                cmd_predict(cfg, args.model, args.data, args.out, args.t_stars, args.threads, log)
            else:
                cmd_evaluate(cfg, args.predictions, args.truth, args.out, args.t_stars, args.threads, log)
    except ConfigError as exc:
        log(f"error [config]: {exc}")
        return EXIT_CONFIG
    except NumericalError as exc:
        log(f"error [{_origin(exc)}]: numerical failure: {exc}")
        return EXIT_NUMERICAL
    except (ContractError, FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as exc:
        log(f"error [{_origin(exc)}]: {exc}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
