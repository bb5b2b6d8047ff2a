"""Failure-mode posterior, survival curves, RUL and evaluation metrics for new units."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import cmgp, io
from ._validation import check_probabilities, check_random_state
from .exceptions import ContractError
from .survival import cumulative_trapezoid

DEFAULT_N_GRID = 200
TAIL_TOL = 1e-4


@dataclass
class ModePosterior:
    probs: np.ndarray
    log_densities: np.ndarray
    smoothing: dict = field(default_factory=dict)   # (mode, sensor) -> SmoothingKernelParams


@dataclass
class SurvivalCurve:
    t_star: float
    grid: np.ndarray        # offsets from t_star
    samples: np.ndarray     # n_mc x len(grid)
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95


@dataclass
class PredictionResult:
    unit_id: str
    t_star: float
    mode_posterior: ModePosterior
    conditional: list
    marginal: SurvivalCurve
    rul: float


def _band(samples, point, level):
    a = 1.0 - level
    lower, upper = np.quantile(samples, [a / 2, 1 - a / 2], axis=0)
    # a skewed sample can push its mean outside the central interval
    return np.minimum(lower, point), np.maximum(upper, point)


def _curve(t_star, grid, samples, level, point=None):
    point = samples.mean(axis=0) if point is None else point
    lower, upper = _band(samples, point, level)
    return SurvivalCurve(float(t_star), grid, samples, point, lower, upper, level)


def _obs_list(model, obs):
    if obs is None:
        return [(np.zeros(0), np.zeros(0))] * model.n_sensors_
    if isinstance(obs, dict):
        unknown = [j for j in obs if not 0 <= int(j) < model.n_sensors_]
        if unknown:
            raise ContractError(f"sensor ids {unknown!r} are unknown to the model")
        return [obs.get(j, (np.zeros(0), np.zeros(0))) for j in range(model.n_sensors_)]
    obs = list(obs)
    if len(obs) > model.n_sensors_:
        raise ContractError(f"got {len(obs)} sensor series, model has {model.n_sensors_}")
    return obs + [(np.zeros(0), np.zeros(0))] * (model.n_sensors_ - len(obs))


def mode_posterior(model, obs, prior_override=None):
    """``p(mode | observations)`` by Bayes' rule over the per-mode CMGP densities.

    ``obs`` is a list (or ``{sensor: series}`` dict) of ``(times, values)``.
    With no observations this is the Dirichlet posterior mean.
    """
    alpha = np.asarray(model.state_.alpha_tilde, float)
    prior = alpha / alpha.sum() if prior_override is None else check_probabilities(prior_override)
    obs = _obs_list(model, obs)
    K = model.n_modes_
    if all(len(t) == 0 for t, _ in obs):
        return ModePosterior(prior.copy(), np.zeros(K), {})
    logdens = np.zeros(K)
    smoothing = {}
    for k in range(K):
        for j, series in enumerate(obs):
            m = model.cmgp_models_[(k, j)]
            sk = cmgp.fit_unit_smoothing(m, series)
            smoothing[(k, j)] = sk
            logdens[k] += cmgp.predictive_logdensity(m, sk, series)
    with np.errstate(divide="ignore"):
        logpost = logdens + np.log(prior)
    probs = np.exp(logpost - logsumexp(logpost))
    return ModePosterior(probs / probs.sum(), logdens, smoothing)


def default_horizon(model, t_star, n_grid=DEFAULT_N_GRID):
    span = 3.0 * (model.t_max_train_ - t_star)
    # at least ten grid steps of the training time scale
    return max(span, 10.0 * model.t_max_train_ / n_grid)


def conditional_survival(model, k, obs, t_star, horizon, n_mc=500, seed=None,
                         n_grid=DEFAULT_N_GRID, level=0.95, x=None, smoothing=None):
    """Monte Carlo posterior predictive survival given failure mode ``k``.

    Each draw samples ``b`` and ``rho`` from their variational posteriors and
    one joint signal path per sensor, then integrates the hazard from
    ``t_star``. ``smoothing`` maps sensor -> SmoothingKernelParams for the
    unit; missing entries are fitted from ``obs``.
    """
    if horizon <= 0 or n_mc < 1:
        raise ContractError("horizon must be positive and n_mc >= 1")
    rng = check_random_state(seed)
    obs = _obs_list(model, obs)
    mv = model.state_.modes[k]
    grid = np.linspace(0.0, horizon, int(n_grid))
    times = t_star + grid
    b = rng.normal(mv.mu_b, np.sqrt(mv.sigma_b_sq), n_mc)
    rho = rng.gamma(mv.alpha_rho, 1.0 / mv.beta_rho, n_mc)
    x = np.zeros(0) if x is None else np.asarray(x, float)
    lin = float(mv.gamma @ x) if x.size else 0.0
    log_h = (b + lin)[:, None] + rho[:, None] * times[None, :]
    for j, series in enumerate(obs):
        m = model.cmgp_models_[(k, j)]
        sk = (smoothing or {}).get(j) or cmgp.fit_unit_smoothing(m, series)
        paths = cmgp.sample_f_paths(m, sk, series if len(series[0]) else None, times, n_mc, rng)
        log_h = log_h + mv.beta[j] * paths
    H = cumulative_trapezoid(np.exp(log_h), times)
    return _curve(t_star, grid, np.exp(-H), level)


def marginal_survival(curves, mode_probs, seed=None):
    """Mixture over failure modes.

    The point curve is the probability-weighted mix of the conditional
    points. Sample row ``s`` is taken from a mode drawn for that index, so the
    band also reflects mode uncertainty.
    """
    probs = check_probabilities(mode_probs)
    if len(curves) != probs.size:
        raise ContractError("need one conditional curve per mode")
    ref = curves[0]
    for c in curves[1:]:
        if c.grid.shape != ref.grid.shape or not np.array_equal(c.grid, ref.grid):
            raise ContractError("conditional curves must share one grid")
        if c.samples.shape != ref.samples.shape:
            raise ContractError("conditional curves must have equal sample counts")
    # correctly rounded sum of the weighted points; exact when one probability is 1
    weighted = np.stack([p * c.point for p, c in zip(probs, curves)])
    point = np.array([math.fsum(col) for col in weighted.T])
    points = np.stack([c.point for c in curves])
    point = np.clip(point, points.min(axis=0), points.max(axis=0))
    rng = check_random_state(seed)
    picks = rng.choice(probs.size, size=ref.samples.shape[0], p=probs)
    stacked = np.stack([c.samples for c in curves])
    samples = stacked[picks, np.arange(picks.size)]
    return _curve(ref.t_star, ref.grid, samples, ref.level, point)


def rul_estimate(curve, tail=TAIL_TOL):
    """Expected remaining life: trapezoid integral of the point curve.

    Integration stops at the first offset where the curve falls below
    ``tail``; a curve still above it at the horizon raises ContractError.
    """
    S, grid = np.asarray(curve.point, float), np.asarray(curve.grid, float)
    below = np.nonzero(S < tail)[0]
    if below.size == 0:
        raise ContractError(f"survival is still {S[-1]:.3g} at the horizon; extend the horizon")
    stop = below[0] + 1
    return float(np.trapezoid(S[:stop], grid[:stop]))


def predict_unit(model, unit_id, obs, t_star, horizon=None, n_mc=500, seed=None,
                 n_grid=DEFAULT_N_GRID, level=0.95, x=None, max_extensions=4):
    """Full prediction for one unit at decision time ``t_star``."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    post = mode_posterior(model, obs)
    horizon = default_horizon(model, t_star, n_grid) if horizon is None else horizon
    for _ in range(max_extensions + 1):
        # same draws on every attempt; only the horizon changes
        seeds = [np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (i,))
                 for i in range(model.n_modes_ + 1)]
        conds = [conditional_survival(model, k, obs, t_star, horizon, n_mc, seeds[k], n_grid, level, x,
                                      {j: post.smoothing.get((k, j)) for j in range(model.n_sensors_)})
                 for k in range(model.n_modes_)]
        marg = marginal_survival(conds, post.probs, seeds[-1])
        try:
            rul = rul_estimate(marg)
            break
        except ContractError:
            horizon *= 2.0
    else:
        raise ContractError(f"unit {unit_id!r}: survival did not decay within the extended horizon")
    return PredictionResult(str(unit_id), float(t_star), post, conds, marg, rul)


# --- metrics ----------------------------------------------------------------------------


def coverage_proportion(curve, true_values, tol=1e-12):
    """Fraction of grid offsets whose band contains the true survival probability."""
    true_values = np.asarray(true_values, float)
    inside = (true_values >= curve.lower - tol) & (true_values <= curve.upper + tol)
    return float(inside.mean())


def evaluate_metrics(results, true_modes, true_ruls, true_curves=None):
    """Per-unit mode error, RUL absolute error and (optionally) coverage.

    ``true_modes``/``true_ruls`` map unit id to the true mode / expected RUL;
    ``true_curves`` maps unit id to ``S_true`` evaluated on the result's grid.
    Returns ``(rows, summary)``.
    """
    ids = [r.unit_id for r in results]
    missing = [u for u in ids if u not in true_modes or u not in true_ruls]
    if true_curves is not None:
        missing += [u for u in ids if u not in true_curves]
    if missing:
        raise ContractError(f"no truth for units {sorted(set(missing))!r}")
    rows = []
    for r in results:
        row = {"unit_id": r.unit_id, "t_star": r.t_star,
               "mode_error": float(1.0 - r.mode_posterior.probs[true_modes[r.unit_id]]),
               "rul_abs_error": float(abs(r.rul - true_ruls[r.unit_id]))}
        if true_curves is not None:
            row["coverage"] = coverage_proportion(r.marginal, true_curves[r.unit_id])
        rows.append(row)
    return rows, summarize(rows)


def summarize(rows):
    metrics = [k for k in ("mode_error", "rul_abs_error", "coverage") if rows and k in rows[0]]
    out = {}
    for k in metrics:
        v = np.array([r[k] for r in rows], float)
        q1, q2, q3 = np.quantile(v, [0.25, 0.5, 0.75])
        out[k] = {"mean": float(v.mean()), "q1": float(q1), "median": float(q2), "q3": float(q3),
                  "n": int(v.size)}
    return out


# --- export -----------------------------------------------------------------------------

PRED_HEADER = ["unit_id", "t_star", "offset", "point", "lower", "upper"]


def predictions_csv(results, n_modes):
    """One row per (unit, grid offset): the marginal curve, its band and the mode posterior."""
    header = PRED_HEADER + [f"p_mode{k}" for k in range(n_modes)]
    rows = []
    for r in results:
        m, probs = r.marginal, list(r.mode_posterior.probs)
        for i, dt in enumerate(m.grid):
            rows.append([r.unit_id, r.t_star, dt, m.point[i], m.lower[i], m.upper[i]] + probs)
    return io.to_csv(header, rows)


def predictions_summary(results, skipped=()):
    return {
        "units": {r.unit_id: {"t_star": r.t_star,
                              "mode_probs": [float(p) for p in r.mode_posterior.probs],
                              "mode_log_densities": [float(v) for v in r.mode_posterior.log_densities],
                              "rul": r.rul,
                              "horizon": float(r.marginal.grid[-1]),
                              "band_level": r.marginal.level}
                  for r in results},
        "skipped": list(skipped),
    }


@dataclass
class LoadedPrediction:
    """A prediction read back from disk: enough for :func:`evaluate_metrics`."""

    unit_id: str
    t_star: float
    mode_posterior: ModePosterior
    marginal: SurvivalCurve
    rul: float


def load_predictions(csv_path, json_path):
    """Inverse of :func:`predictions_csv` / :func:`predictions_summary` (samples are not stored)."""
    summary = json.loads(Path(json_path).read_text())
    rows = {}
    for row in io.read_csv(csv_path):
        rows.setdefault(row["unit_id"], []).append(row)
    missing = sorted(set(summary["units"]) ^ set(rows))
    if missing:
        raise ContractError(f"CSV and JSON disagree on units {missing!r}")
    out = []
    for uid, info in summary["units"].items():
        rs = rows[uid]
        col = lambda k: np.array([float(r[k]) for r in rs])  # noqa: E731
        probs = np.array(info["mode_probs"], float)
        curve = SurvivalCurve(float(info["t_star"]), col("offset"), np.zeros((0, len(rs))), col("point"),
                              col("lower"), col("upper"), info.get("band_level", 0.95))
        post = ModePosterior(probs, np.array(info.get("mode_log_densities", np.zeros(probs.size)), float))
        out.append(LoadedPrediction(uid, float(info["t_star"]), post, curve, float(info["rul"])))
    return out
