"""Sparse convolved multi-output GP for one (failure mode, sensor) group.

Every unit in a group is a smoothed copy of one shared latent process ``u``.
Training uses the FITC approximation: given the inducing variables
``u(w)``, each observation's latent value is independent with the exact
conditional variance. ``approx="dtc"`` drops that residual variance.

Predictions for a unit use the exact conditional ``p(f | u)`` over all the
unit's requested times, so a new unit's own observations inform its
trajectory beyond what passes through ``u``.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from . import kernels
from ._linalg import (chol_solve, gaussian_logpdf_chol, jitter_cholesky,
                      solve_lower, solve_upper_t)
from ._validation import check_positive, check_random_state, check_series
from .exceptions import ContractError, NumericalError
from .kernels import LatentKernelParams, SmoothingKernelParams

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class InducingGrid:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, float)
        if w.ndim != 1 or w.size < 2:
            raise ContractError("inducing grid needs at least 2 points")
        if np.any(np.diff(w) <= 0):
            raise ContractError("inducing grid must be strictly increasing")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, t_max, n_inducing=20, t_min=0.0):
        return cls(np.linspace(t_min, t_max, int(n_inducing)))

    def __len__(self):
        return self.w.size


@dataclass
class CMGPHyper:
    """Latent length-scale, per-unit smoothing and observation noise."""

    lam: float
    smoothing: dict
    sigma_eps_sq: float

    def __post_init__(self):
        check_positive(self.lam, "lam")
        check_positive(self.sigma_eps_sq, "sigma_eps_sq")

    @property
    def latent(self):
        return LatentKernelParams(self.lam)

    def mean_smoothing(self):
        """Average smoothing over training units; the starting point for a new unit."""
        sks = list(self.smoothing.values())
        return SmoothingKernelParams(float(np.mean([s.eta for s in sks])),
                                     float(np.mean([s.xi for s in sks])))


@dataclass
class SignalPosterior:
    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self):
        return np.diag(self.cov).copy()


@dataclass
class CMGPModel:
    hyper: CMGPHyper
    grid: InducingGrid
    u_mean: np.ndarray
    u_cov: np.ndarray
    mode: object = None
    sensor: object = None
    approx: str = "fitc"
    log_marginal_likelihood: float = float("nan")
    _kuu_chol: np.ndarray = field(default=None, repr=False, compare=False)

    def kuu_chol(self):
        if self._kuu_chol is None:
            self._kuu_chol = _kuu_factor(self.grid, self.hyper.latent)
        return self._kuu_chol

    def to_dict(self):
        return {
            "mode": self.mode,
            "sensor": self.sensor,
            "approx": self.approx,
            "lam": self.hyper.lam,
            "sigma_eps_sq": self.hyper.sigma_eps_sq,
            "smoothing": {str(k): [v.eta, v.xi] for k, v in self.hyper.smoothing.items()},
            "grid": self.grid.w.tolist(),
            "u_mean": self.u_mean.tolist(),
            "u_cov": self.u_cov.tolist(),
            "log_marginal_likelihood": self.log_marginal_likelihood,
        }

    @classmethod
    def from_dict(cls, d):
        hyper = CMGPHyper(d["lam"], {k: SmoothingKernelParams(*v) for k, v in d["smoothing"].items()},
                          d["sigma_eps_sq"])
        return cls(hyper, InducingGrid(np.array(d["grid"])), np.array(d["u_mean"], float),
                   np.array(d["u_cov"], float), d.get("mode"), d.get("sensor"),
                   d.get("approx", "fitc"), d.get("log_marginal_likelihood", float("nan")))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _kuu_factor(grid, lk):
    Kuu = kernels.gram_uu(grid.w, lk)
    L, _ = jitter_cholesky(Kuu, context={"lam": lk.lam, "Q": len(grid)})
    return L


def _normalize_data(data):
    """Validate ``{unit: (times, values)}`` and drop empty series."""
    out = {}
    for uid, series in data.items():
        t, y = check_series(*series, name=f"unit {uid!r}")
        if t.size:
            out[uid] = (t, y)
    return out


# --- FITC core ----------------------------------------------------------------------


class _Stacked:
    """All observations of one group flattened, with unit membership."""

    def __init__(self, data, units):
        self.units = list(units)
        ts, ys, idx = [], [], []
        for k, uid in enumerate(self.units):
            t, y = data[uid]
            ts.append(t)
            ys.append(y)
            idx.append(np.full(t.size, k))
        self.t = np.concatenate(ts) if ts else np.zeros(0)
        self.y = np.concatenate(ys) if ys else np.zeros(0)
        self.idx = np.concatenate(idx) if idx else np.zeros(0, int)


def _fitc(stk, lam, etas, xis, sigma_eps_sq, w, approx="fitc", grad=False):
    """Log marginal likelihood (and optionally its gradient) under FITC/DTC.

    ``etas``/``xis`` are per-unit arrays aligned with ``stk.units``.
    Gradient is w.r.t. ``(log lam, log sigma_eps_sq, etas, log xis)``.
    Returns ``(loglik, grad or None, posterior pieces)``.
    """
    t, y, idx = stk.t, stk.y, stk.idx
    N, Q = t.size, w.size
    tau_uu = w[:, None] - w[None, :]
    Kuu = np.exp(-0.5 * tau_uu**2 / lam**2)
    L, jit = jitter_cholesky(Kuu, context={"lam": lam, "sigma_eps_sq": sigma_eps_sq})

    eta_n, xi_n = etas[idx], xis[idx]
    s2 = lam**2 + xi_n**2                       # per point
    tau = t[None, :] - w[:, None]               # Q x N
    base = lam / np.sqrt(s2) * np.exp(-0.5 * tau**2 / s2)
    P = eta_n * base                            # K_uf
    s2d = lam**2 + 2 * xi_n**2
    d = eta_n**2 * lam / np.sqrt(s2d)

    V = solve_lower(L, P)
    if approx == "fitc":
        q = np.einsum("ij,ij->j", V, V)
        Lam = np.maximum(d - q, 0.0) + sigma_eps_sq
    else:
        Lam = np.full(N, sigma_eps_sq)
    Vl = V / Lam
    B = np.eye(Q) + Vl @ V.T
    LB, _ = jitter_cholesky(B, context={"lam": lam, "sigma_eps_sq": sigma_eps_sq}, start=0.0)
    ctmp = solve_lower(LB, Vl @ y)
    logdet = np.log(Lam).sum() + 2 * np.log(np.diag(LB)).sum()
    quad = (y * y / Lam).sum() - ctmp @ ctmp
    ll = -0.5 * (quad + logdet + N * LOG_2PI)

    pieces = {"L": L, "LB": LB, "ctmp": ctmp}
    if not grad:
        return ll, None, pieces

    # reverse-mode through Kuu, P = K_uf and Lam
    W = solve_lower(LB, V)                      # p_n^T A^-1 p_n = |W_n|^2
    c = solve_upper_t(L, solve_upper_t(LB, ctmp))   # A^-1 b
    r_res = y - P.T @ c
    g_lam = -0.5 * (1.0 / Lam - np.einsum("ij,ij->j", W, W) / Lam**2 - r_res**2 / Lam**2)
    AinvP = solve_upper_t(L, solve_upper_t(LB, W))
    GP = -AinvP / Lam + np.outer(c, r_res / Lam)
    Ainv = solve_upper_t(L, solve_upper_t(LB, solve_lower(LB, solve_lower(L, np.eye(Q)))))
    Kinv = chol_solve(L, np.eye(Q))
    GK = -0.5 * (Ainv - Kinv + np.outer(c, c))
    if approx == "fitc":
        KinvP = solve_upper_t(L, V)
        GP -= 2 * KinvP * g_lam
        GK += (KinvP * g_lam) @ KinvP.T
        Gd = g_lam
    else:
        Gd = np.zeros(N)
    g_sig = g_lam.sum()

    nU = len(stk.units)
    dKuu_dloglam = Kuu * tau_uu**2 / lam**2
    gp_base = np.einsum("ij,ij->j", GP, base)              # dL/d eta per point
    dlogP_lam = 1 - lam**2 / s2 + tau**2 * lam**2 / s2**2
    dlogP_xi = -xi_n**2 / s2 + tau**2 * xi_n**2 / s2**2
    gl = (GK * dKuu_dloglam).sum() + (GP * P * dlogP_lam).sum() + (Gd * d * (1 - lam**2 / s2d)).sum()
    g_eta = np.bincount(idx, gp_base + Gd * 2 * eta_n * lam / np.sqrt(s2d), minlength=nU)
    g_xi = np.bincount(idx, np.einsum("ij,ij->j", GP * P, dlogP_xi) + Gd * d * (-2 * xi_n**2 / s2d),
                       minlength=nU)
    g = np.concatenate([[gl, g_sig * sigma_eps_sq], g_eta, g_xi])
    return ll, g, pieces


def _hyper_arrays(hyper, units):
    missing = [u for u in units if u not in hyper.smoothing]
    if missing:
        raise ContractError(f"no smoothing parameters for units {missing!r}")
    etas = np.array([hyper.smoothing[u].eta for u in units], float)
    xis = np.array([hyper.smoothing[u].xi for u in units], float)
    return etas, xis


def sparse_marginal_loglik(data, hyper, grid, approx="fitc"):
    """Log marginal likelihood of one group's observations under FITC (or DTC)."""
    data = _normalize_data(data)
    if not data:
        raise ContractError("at least one observation is required")
    stk = _Stacked(data, data.keys())
    etas, xis = _hyper_arrays(hyper, stk.units)
    ll, _, _ = _fitc(stk, hyper.lam, etas, xis, hyper.sigma_eps_sq, grid.w, approx)
    return float(ll)


def posterior_u(data, hyper, grid, approx="fitc"):
    """Gaussian posterior ``(mean, cov)`` of the inducing variables."""
    lk = hyper.latent
    data = _normalize_data(data)
    if not data:
        return np.zeros(len(grid)), kernels.gram_uu(grid.w, lk)
    stk = _Stacked(data, data.keys())
    etas, xis = _hyper_arrays(hyper, stk.units)
    _, _, pc = _fitc(stk, hyper.lam, etas, xis, hyper.sigma_eps_sq, grid.w, approx)
    M = solve_lower(pc["LB"], pc["L"].T).T       # L LB^-T
    mean = M @ pc["ctmp"]
    cov = M @ M.T
    return mean, 0.5 * (cov + cov.T)


# --- hyperparameter fitting ---------------------------------------------------------


@dataclass
class FitConfig:
    n_restarts: int = 5
    max_iter: int = 500
    random_state: object = 0
    restart_scale: float = 0.5
    approx: str = "fitc"


def init_hyper(data, lam=None):
    """Data-driven starting point: noise from first differences, scale from RMS."""
    data = _normalize_data(data)
    if not data:
        raise ContractError("cannot initialise hyperparameters without data")
    t_all = np.concatenate([t for t, _ in data.values()])
    span = max(np.ptp(t_all), 1e-3)
    lam = 0.2 * span if lam is None else lam
    diffs = [np.diff(y) for _, y in data.values() if y.size > 1]
    ms = np.mean(np.concatenate([y for _, y in data.values()]) ** 2)
    noise = 0.5 * np.mean(np.concatenate(diffs) ** 2) if diffs else 0.1 * ms
    noise = float(np.clip(noise, 1e-6 * max(ms, 1e-12), max(ms, 1e-12)))
    smoothing = {}
    for uid, (_, y) in data.items():
        eta = np.sqrt(max(np.mean(y**2) - noise, 1e-3 * ms, 1e-12))
        smoothing[uid] = SmoothingKernelParams(float(eta), float(0.05 * lam))
    return CMGPHyper(float(lam), smoothing, noise)


def fit_hyperparams(data, grid, init, config=None):
    """Maximise the sparse marginal likelihood with L-BFGS-B and random restarts.

    Positive parameters are optimised on the log scale. The first run starts
    at ``init``; the result never scores below ``init``.
    """
    config = config or FitConfig()
    data = _normalize_data(data)
    if not data:
        raise ContractError("fit_hyperparams needs at least one observation")
    stk = _Stacked(data, data.keys())
    nU = len(stk.units)
    etas0, xis0 = _hyper_arrays(init, stk.units)
    w = grid.w
    span = max(np.ptp(np.concatenate([stk.t, w])), 1e-3)
    ms = max(np.mean(stk.y**2), 1e-12)

    def unpack(theta):
        return (np.exp(theta[0]), np.exp(theta[1]), theta[2:2 + nU], np.exp(theta[2 + nU:]))

    def pack(lam, sig, etas, xis):
        return np.concatenate([[np.log(lam), np.log(sig)], etas, np.log(np.maximum(xis, 1e-4 * lam))])

    trace = []

    def objective(theta):
        lam, sig, etas, xis = unpack(theta)
        try:
            ll, g, _ = _fitc(stk, lam, etas, xis, sig, w, config.approx, grad=True)
        except NumericalError:
            trace.append(np.nan)
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(ll) or not np.all(np.isfinite(g)):
            trace.append(np.nan)
            return 1e25, np.zeros_like(theta)
        trace.append(ll)
        return -ll, -g

    bounds = ([(np.log(0.5 * np.min(np.diff(w))), np.log(10 * span)),
               (np.log(1e-8 * ms), np.log(10 * ms))]
              + [(None, None)] * nU
              + [(np.log(1e-4 * span), np.log(span))] * nU)
    theta0 = pack(init.lam, init.sigma_eps_sq, etas0, xis0)
    theta0 = np.clip(theta0, [b[0] if b[0] is not None else -np.inf for b in bounds],
                     [b[1] if b[1] is not None else np.inf for b in bounds])
    f_init, _ = objective(theta0)
    rng = check_random_state(config.random_state)
    best_theta, best_f = theta0, f_init
    starts = [theta0]
    for _ in range(max(config.n_restarts, 1) - 1):
        th = theta0.copy()
        th[:2] += rng.normal(0, config.restart_scale, 2)
        th[2:2 + nU] *= np.exp(rng.normal(0, config.restart_scale, nU))
        th[2 + nU:] += rng.normal(0, config.restart_scale, nU)
        starts.append(th)
    for th in starts:
        res = optimize.minimize(objective, th, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": config.max_iter})
        if np.isfinite(res.fun) and res.fun < best_f:
            best_theta, best_f = res.x, res.fun
    if not np.isfinite(best_f) or best_f >= 1e25:
        raise NumericalError("marginal likelihood was non-finite at every restart",
                             {"trace": trace[-50:]})
    lam, sig, etas, xis = unpack(best_theta)
    smoothing = {u: SmoothingKernelParams(float(e), float(x)) for u, e, x in zip(stk.units, etas, xis)}
    return CMGPHyper(float(lam), smoothing, float(sig))


def fit_group(data, n_inducing=20, t_max=None, config=None, mode=None, sensor=None):
    """Fit hyperparameters and the u-posterior for one group; returns a CMGPModel."""
    config = config or FitConfig()
    data = _normalize_data(data)
    if not data:
        raise ContractError(f"no observations for mode {mode!r}, sensor {sensor!r}")
    if t_max is None:
        t_max = max(t.max() for t, _ in data.values())
    grid = InducingGrid.uniform(max(t_max, 1e-6), n_inducing)
    hyper = fit_hyperparams(data, grid, init_hyper(data), config)
    mean, cov = posterior_u(data, hyper, grid, config.approx)
    ll = sparse_marginal_loglik(data, hyper, grid, config.approx)
    return CMGPModel(hyper, grid, mean, cov, mode, sensor, config.approx, ll)


# --- prediction for a (new) unit -----------------------------------------------------


def _prior_moments(model, sk, times):
    """Mean/cov of ``f(times)`` after marginalising u over its posterior."""
    lk = model.hyper.latent
    L = model.kuu_chol()
    Kfu = kernels.gram_fu(times, model.grid.w, lk, sk)
    A = chol_solve(L, Kfu.T).T                    # K_fu K_uu^-1
    Kff = kernels.gram_ff(times, times, lk, sk)
    mean = A @ model.u_mean
    cov = A @ model.u_cov @ A.T + Kff - A @ Kfu.T
    return mean, 0.5 * (cov + cov.T)


def predict_f(model, unit_smoothing, new_data=None, eval_times=None):
    """Gaussian predictive of a unit's latent signal at ``eval_times``.

    With ``new_data = (times, values)`` the prediction also conditions on the
    unit's own noisy observations.
    """
    eval_times = np.atleast_1d(np.asarray(eval_times, float))
    if eval_times.size == 0:
        raise ContractError("eval_times must be non-empty")
    if new_data is None or len(new_data[0]) == 0:
        mean, cov = _prior_moments(model, unit_smoothing, eval_times)
        return SignalPosterior(eval_times, mean, cov)
    t_obs, y_obs = check_series(*new_data, name="new_data")
    m = eval_times.size
    mu, S = _prior_moments(model, unit_smoothing, np.concatenate([eval_times, t_obs]))
    Syy = S[m:, m:] + model.hyper.sigma_eps_sq * np.eye(t_obs.size)
    Ly, _ = jitter_cholesky(Syy, context={"unit": "new"}, start=0.0)
    Ksy = S[:m, m:]
    G = solve_lower(Ly, Ksy.T)
    mean = mu[:m] + G.T @ solve_lower(Ly, y_obs - mu[m:])
    cov = S[:m, :m] - G.T @ G
    return SignalPosterior(eval_times, mean, 0.5 * (cov + cov.T))


def predictive_logdensity(model, unit_smoothing, obs):
    """``log p(obs)`` for a unit under this group's fitted model (0 for no data)."""
    t, y = check_series(*obs, name="obs")
    if t.size == 0:
        return 0.0
    mu, S = _prior_moments(model, unit_smoothing, t)
    S = S + model.hyper.sigma_eps_sq * np.eye(t.size)
    L, _ = jitter_cholesky(S, context={"mode": model.mode, "sensor": model.sensor}, start=0.0)
    return float(gaussian_logpdf_chol(y - mu, L))


def smoothing_bounds(hyper, margin=0.1):
    """Box for a new unit's ``(eta, log xi)``: the trained units' range plus a margin.

    A new unit is assumed to resemble the units the group was trained on;
    without the box the optimiser can reshape any mode to fit any signal.
    """
    eta = np.array([v.eta for v in hyper.smoothing.values()], float)
    log_xi = np.log(np.maximum([v.xi for v in hyper.smoothing.values()], 1e-12 * hyper.lam))
    if eta.size < 2:
        e, x = (eta[0], log_xi[0]) if eta.size else (1.0, np.log(0.05 * hyper.lam))
        return (e - 0.5 * abs(e), e + 0.5 * abs(e)), (x - np.log(10.0), x + np.log(10.0))
    pad_e, pad_x = margin * np.ptp(eta), margin * np.ptp(log_xi)
    return ((eta.min() - pad_e, eta.max() + pad_e),
            (log_xi.min() - pad_x, log_xi.max() + pad_x))


def fit_unit_smoothing(model, obs, init=None, max_iter=100, bounds=None):
    """Smoothing parameters for an unseen unit.

    Starts from the training-unit average and maximises the unit's
    predictive log density with the u-posterior held fixed, inside
    ``bounds`` (default :func:`smoothing_bounds`).
    """
    init = init or model.hyper.mean_smoothing()
    t, y = check_series(*obs, name="obs")
    if t.size == 0:
        return init
    (e_lo, e_hi), (lo, hi) = bounds or smoothing_bounds(model.hyper)

    def negll(theta):
        sk = SmoothingKernelParams(float(theta[0]), float(np.exp(theta[1])))
        try:
            return -predictive_logdensity(model, sk, (t, y))
        except NumericalError:
            return 1e25

    x0 = np.array([np.clip(init.eta, e_lo, e_hi), np.clip(np.log(max(init.xi, 1e-300)), lo, hi)])
    f0 = negll(x0)
    res = optimize.minimize(negll, x0, method="L-BFGS-B", bounds=[(e_lo, e_hi), (lo, hi)],
                            options={"maxiter": max_iter})
    x = res.x if res.fun <= f0 else x0
    return SmoothingKernelParams(float(x[0]), float(np.exp(x[1])))


def sample_f_paths(model, unit_smoothing, new_data, grid_times, n_samples, seed=None):
    """Joint draws of the latent signal on ``grid_times``: ``(n_samples, len(grid_times))``."""
    if int(n_samples) < 1:
        raise ContractError("n_samples must be >= 1")
    post = predict_f(model, unit_smoothing, new_data, grid_times)
    return _draw(post, int(n_samples), check_random_state(seed))


def _draw(post, n, rng):
    L, _ = jitter_cholesky(post.cov, context={"what": "path sampling"})
    z = rng.standard_normal((n, post.mean.size))
    return post.mean + z @ L.T


# --- estimator ----------------------------------------------------------------------


class CMGPRegressor(RegressorMixin, BaseEstimator):
    """Sparse convolved multi-output GP for one sensor across many units.

    ``X`` has two columns, ``(unit_id, time)``; ``y`` holds the noisy sensor
    readings. After ``fit``, ``predict`` returns the denoised signal of a
    training unit at arbitrary times.
    """

    def __init__(self, n_inducing=20, approx="fitc", n_restarts=5, max_iter=500,
                 t_max=None, random_state=0):
        self.n_inducing = n_inducing
        self.approx = approx
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.t_max = t_max
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != 2:
            raise ContractError("X must have columns (unit_id, time)")
        if self.approx not in ("fitc", "dtc"):
            raise ContractError(f"unknown approximation {self.approx!r}")
        data = _group_rows(X, y)
        cfg = FitConfig(self.n_restarts, self.max_iter, self.random_state, approx=self.approx)
        self.model_ = fit_group(data, self.n_inducing, self.t_max, cfg)
        self.hyper_ = self.model_.hyper
        self.log_marginal_likelihood_ = self.model_.log_marginal_likelihood
        self.units_ = np.array(sorted(data))
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        mean = np.empty(X.shape[0])
        std = np.empty(X.shape[0])
        for uid in np.unique(X[:, 0]):
            key = float(uid)
            if key not in self.hyper_.smoothing:
                raise ContractError(f"unit {uid!r} was not seen during fit")
            rows = X[:, 0] == uid
            post = predict_f(self.model_, self.hyper_.smoothing[key], None, X[rows, 1])
            mean[rows] = post.mean
            std[rows] = np.sqrt(np.maximum(post.var, 0))
        return (mean, std) if return_std else mean


def _group_rows(X, y):
    data = {}
    for uid in np.unique(X[:, 0]):
        rows = X[:, 0] == uid
        order = np.argsort(X[rows, 1], kind="stable")
        data[float(uid)] = (X[rows, 1][order], y[rows][order])
    return data
