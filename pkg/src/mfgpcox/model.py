"""The joint estimator: per-(mode, sensor) CMGPs plus the Bayesian Cox layer."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import cmgp, io
from .exceptions import ContractError
from .inference import (Priors, TrainingUnit, VariationalState, VIConfig, fit_variational,
                        unit_signal_posteriors)
from .prediction import DEFAULT_N_GRID, mode_posterior, predict_unit
from .survival import EventRecord

FORMAT_VERSION = "mfgpcox-model/1"


@dataclass
class Dataset:
    """Units table plus per-unit sensor series.

    ``units``: ``{uid: dict(failure_mode, event_time, event_indicator, x)}``.
    ``signals``: ``{uid: [(times, values) per sensor]}``.
    """

    units: dict
    signals: dict

    @classmethod
    def from_dir(cls, path, n_sensors=None):
        path = Path(path)
        return cls(io.read_units(path / "units.csv"), io.read_signals(path / "signals.csv", n_sensors))

    @property
    def n_sensors(self):
        return max((len(s) for s in self.signals.values()), default=0)

    def series(self, uid, n_sensors):
        s = list(self.signals.get(uid, []))
        return s + [(np.zeros(0), np.zeros(0))] * (n_sensors - len(s))


def _check_dataset(data):
    if not isinstance(data, Dataset):
        raise ContractError(f"expected a Dataset, got {type(data).__name__}")
    if not data.units:
        raise ContractError("dataset has no units")
    extra = sorted(set(data.signals) - set(data.units))
    if extra:
        raise ContractError(f"signals for units missing from the units table: {extra[:5]!r}")


class MFGPCox(BaseEstimator):
    """Failure-mode-aware survival model driven by multi-output GP signal models.

    ``fit`` learns one sparse convolved GP per (failure mode, sensor) from
    the training signals, then the Bayesian Cox layer by variational
    inference. Prediction is for new, partially observed units at a
    decision time ``t_star``.

    Parameters
    ----------
    n_modes : int or None
        Number of failure modes. ``None`` infers ``max(mode) + 1``.
    n_inducing, approx, n_restarts, cmgp_max_iter :
        Sparse GP settings per (mode, sensor) group.
    n_mc_fit, vi_max_iter, grid_steps :
        Monte Carlo size, Nelder-Mead budget and hazard integration steps for VI.
    n_mc_predict, pred_grid, band_level :
        Monte Carlo size, number of offsets and credible level for survival curves.
    priors : dict or None
        Overrides for ``Priors.default`` keyword arguments.
    random_state : int
    n_jobs : int
        Threads used for the independent CMGP fits and per-unit predictions.
        Results do not depend on it.
    """

    def __init__(self, n_modes=None, n_inducing=20, approx="fitc", n_restarts=5, cmgp_max_iter=500,
                 n_mc_fit=64, vi_max_iter=4000, grid_steps=200, n_mc_predict=500,
                 pred_grid=DEFAULT_N_GRID, band_level=0.95, priors=None, random_state=0, n_jobs=1):
        self.n_modes = n_modes
        self.n_inducing = n_inducing
        self.approx = approx
        self.n_restarts = n_restarts
        self.cmgp_max_iter = cmgp_max_iter
        self.n_mc_fit = n_mc_fit
        self.vi_max_iter = vi_max_iter
        self.grid_steps = grid_steps
        self.n_mc_predict = n_mc_predict
        self.pred_grid = pred_grid
        self.band_level = band_level
        self.priors = priors
        self.random_state = random_state
        self.n_jobs = n_jobs

    # --- fitting -------------------------------------------------------------------

    def _map(self, fn, items):
        if int(self.n_jobs) <= 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(int(self.n_jobs)) as pool:
            return list(pool.map(fn, items))

    def fit(self, X, y=None):
        """Fit on a training ``Dataset``; ``y`` is unused."""
        _check_dataset(X)
        ids = list(X.units)
        modes = [X.units[u]["failure_mode"] for u in ids]
        if any(m is None for m in modes):
            raise ContractError("every training unit needs a failure mode")
        K = int(self.n_modes) if self.n_modes is not None else max(modes) + 1
        bad = sorted({m for m in modes if not 0 <= m < K})
        if bad:
            raise ContractError(f"failure modes {bad!r} outside 0..{K - 1}")
        for k in range(K):
            if k not in modes:
                raise ContractError(f"failure mode {k} has no training units")
        J = X.n_sensors
        if J < 1:
            raise ContractError("dataset has no sensor observations")

        records = {u: EventRecord(X.units[u]["event_time"], X.units[u]["event_indicator"],
                                  X.units[u]["x"]) for u in ids}
        seeds = np.random.SeedSequence(self.random_state).spawn(K * J + 1)
        t_max = max(r.V for r in records.values())

        def fit_one(kj):
            k, j = kj
            data = {u: X.series(u, J)[j] for u, m in zip(ids, modes) if m == k}
            config = cmgp.FitConfig(self.n_restarts, self.cmgp_max_iter,
                                    int(seeds[k * J + j].generate_state(1)[0]), approx=self.approx)
            return cmgp.fit_group(data, self.n_inducing, t_max, config, mode=k, sensor=j)

        keys = [(k, j) for k in range(K) for j in range(J)]
        self.cmgp_models_ = dict(zip(keys, self._map(fit_one, keys)))

        prior_kw = dict(self.priors or {})
        self.priors_ = Priors.default([records[u] for u in ids], modes, K, **prior_kw)
        units = [TrainingUnit(records[u], m,
                              unit_signal_posteriors([self.cmgp_models_[(m, j)] for j in range(J)],
                                                     u, records[u].V, self.grid_steps))
                 for u, m in zip(ids, modes)]
        vi_seed = int(seeds[-1].generate_state(1)[0])
        self.state_, self.elbo_traces_ = fit_variational(
            units, self.priors_, VIConfig(self.n_mc_fit, vi_seed, self.vi_max_iter))
        self.n_modes_, self.n_sensors_ = K, J
        self.n_static_ = records[ids[0]].x.size
        self.t_max_train_ = float(max(r.V for r in records.values() if r.delta) if any(
            r.delta for r in records.values()) else t_max)
        return self

    # --- prediction ----------------------------------------------------------------

    def _unit_seed(self, uid, t_star):
        # stable per-unit stream, independent of ordering and thread count
        key = [int(b) for b in f"{uid}|{float(t_star)!r}".encode()]
        return np.random.SeedSequence([int(self.random_state)] + key)

    def predict_survival(self, X, t_star, horizon=None):
        """``PredictionResult`` per unit of ``X`` (a Dataset or ``{uid: series}``)."""
        check_is_fitted(self, "state_")
        signals, units = (X.signals, X.units) if isinstance(X, Dataset) else (X, {})
        ids = list(units) if units else list(signals)

        def one(uid):
            obs = list(signals.get(uid, []))
            x = units.get(uid, {}).get("x") if units else None
            return predict_unit(self, uid, obs, t_star, horizon, self.n_mc_predict,
                                self._unit_seed(uid, t_star), self.pred_grid, self.band_level,
                                x if x is not None and np.size(x) else None)

        return self._map(one, ids)

    def predict_proba(self, X):
        """Failure-mode posterior probabilities, one row per unit."""
        check_is_fitted(self, "state_")
        signals = X.signals if isinstance(X, Dataset) else X
        return np.array([mode_posterior(self, list(s)).probs for s in signals.values()])

    def predict(self, X, t_star=0.0, horizon=None):
        """Expected remaining useful life at ``t_star`` for each unit."""
        return np.array([r.rul for r in self.predict_survival(X, t_star, horizon)])

    # --- persistence ---------------------------------------------------------------

    def to_dict(self):
        check_is_fitted(self, "state_")
        return {
            "format": FORMAT_VERSION,
            # n_jobs is a runtime setting and is left out so files do not depend on it
            "params": {k: v for k, v in self.get_params().items() if k != "n_jobs"},
            "n_modes": self.n_modes_,
            "n_sensors": self.n_sensors_,
            "n_static": self.n_static_,
            "t_max_train": self.t_max_train_,
            "priors": self.priors_.to_dict(),
            "state": self.state_.to_dict(),
            "elbo_traces": [list(map(float, t)) for t in self.elbo_traces_],
            "cmgp": [m.to_dict() for _, m in sorted(self.cmgp_models_.items())],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT_VERSION:
            raise ContractError(f"unsupported model format {d.get('format')!r}")
        est = cls(**d["params"])
        est.n_modes_, est.n_sensors_ = int(d["n_modes"]), int(d["n_sensors"])
        est.n_static_ = int(d["n_static"])
        est.t_max_train_ = float(d["t_max_train"])
        est.priors_ = Priors.from_dict(d["priors"])
        est.state_ = VariationalState.from_dict(d["state"])
        est.elbo_traces_ = [list(t) for t in d["elbo_traces"]]
        models = [cmgp.CMGPModel.from_dict(m) for m in d["cmgp"]]
        est.cmgp_models_ = {(int(m.mode), int(m.sensor)): m for m in models}
        return est

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def fit_report(self):
        """Final log marginal likelihood per CMGP group and the ELBO traces."""
        check_is_fitted(self, "state_")
        return {
            "cmgp_log_marginal_likelihood": {f"mode{k}_sensor{j}": float(m.log_marginal_likelihood)
                                             for (k, j), m in sorted(self.cmgp_models_.items())},
            "elbo_traces": [list(map(float, t)) for t in self.elbo_traces_],
        }
