"""Mean-field variational inference for the Cox and failure-mode layers.

The variational families match the priors: Dirichlet for the mode
probabilities, Normal for each baseline intercept ``b_k`` and Gamma
(shape-rate) for each baseline slope ``rho_k``. Cox coefficients ``gamma_k``
and ``beta_k`` are point parameters. Latent signals are not given a
variational factor; their exact CMGP posterior is sampled instead.

The ELBO expectation over ``f`` and ``rho`` is estimated by Monte Carlo with
common random numbers, so for a fixed seed it is a deterministic, smooth
function of the variational parameters. Expectations that have closed forms
(everything linear in ``b``/``rho``, and ``E[exp(b)]``) are used directly.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats

from . import cmgp
from ._validation import check_random_state, check_vector
from .exceptions import ContractError, NumericalError
from .survival import DEFAULT_GRID_STEPS, EventRecord, cumulative_trapezoid, integration_grid

# --- KL divergences -----------------------------------------------------------------


def kl_normal(q, p):
    """KL(N(q_mean, q_var) || N(p_mean, p_var))."""
    (mq, vq), (mp, vp) = q, p
    if vq <= 0 or vp <= 0:
        raise ContractError("variances must be positive")
    return 0.5 * (vq / vp + (mq - mp) ** 2 / vp - 1.0 + np.log(vp / vq))


def kl_gamma(q, p):
    """KL between Gamma distributions given as (shape, rate)."""
    (aq, bq), (ap, bp) = q, p
    if min(aq, bq, ap, bp) <= 0:
        raise ContractError("Gamma shape and rate must be positive")
    return ((aq - ap) * special.digamma(aq) - special.gammaln(aq) + special.gammaln(ap)
            + ap * (np.log(bq) - np.log(bp)) + aq * (bp - bq) / bq)


def kl_dirichlet(q, p):
    q = check_vector(q, "q", allow_empty=False)
    p = check_vector(p, "p", allow_empty=False)
    if q.size != p.size:
        raise ContractError("Dirichlet parameter vectors differ in length")
    if np.any(q <= 0) or np.any(p <= 0):
        raise ContractError("Dirichlet parameters must be positive")
    if np.array_equal(q, p):
        return 0.0
    q0, p0 = q.sum(), p.sum()
    # clipped: the terms cancel to rounding error when q is close to p
    return max(0.0, float(special.gammaln(q0) - special.gammaln(q).sum() - special.gammaln(p0)
                 + special.gammaln(p).sum() + ((q - p) * (special.digamma(q) - special.digamma(q0))).sum()))


def dirichlet_conjugate_update(alpha, mode_counts):
    alpha = check_vector(alpha, "alpha", allow_empty=False)
    counts = check_vector(mode_counts, "mode_counts", length=alpha.size)
    if np.any(counts < 0):
        raise ContractError("mode counts must be non-negative")
    return alpha + counts


def expected_log_pi(alpha_tilde):
    a = np.asarray(alpha_tilde, float)
    return special.digamma(a) - special.digamma(a.sum())


# --- priors and variational state -----------------------------------------------------


@dataclass
class Priors:
    mu_b: np.ndarray
    sigma_b_sq: np.ndarray
    alpha_rho: np.ndarray
    beta_rho: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        for name in ("mu_b", "sigma_b_sq", "alpha_rho", "beta_rho", "alpha"):
            setattr(self, name, check_vector(getattr(self, name), name))
        K = self.alpha.size
        if any(getattr(self, n).size != K for n in ("mu_b", "sigma_b_sq", "alpha_rho", "beta_rho")):
            raise ContractError("all prior vectors need one entry per failure mode")
        if np.any(self.sigma_b_sq <= 0) or np.any(self.alpha_rho <= 0) or np.any(self.beta_rho <= 0):
            raise ContractError("prior variances and Gamma parameters must be positive")
        if np.any(self.alpha <= 0):
            raise ContractError("Dirichlet concentration must be positive")

    @classmethod
    def default(cls, records, modes, n_modes, sigma_b_sq=100.0, rho_shape=2.0, rho_mean=0.01,
                alpha=1.0):
        """Weakly informative defaults.

        ``mu_b`` is the log constant-hazard MLE of each mode (failures over
        total exposure); the Gamma prior on ``rho`` has mean ``rho_mean``.
        ``mu_b`` overstates the time-zero log hazard whenever the hazard
        grows, so its variance is kept wide.
        """
        modes = np.asarray(modes)
        mu_b = np.empty(n_modes)
        for k in range(n_modes):
            recs = [r for r, m in zip(records, modes) if m == k]
            events = sum(r.delta for r in recs)
            exposure = sum(r.V for r in recs)
            mu_b[k] = np.log(max(events, 0.5) / exposure) if exposure > 0 else 0.0
        return cls(mu_b, np.full(n_modes, sigma_b_sq), np.full(n_modes, rho_shape),
                   np.full(n_modes, rho_shape / rho_mean), np.full(n_modes, alpha))

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("mu_b", "sigma_b_sq", "alpha_rho", "beta_rho", "alpha")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.array(v, float) for k, v in d.items()})


@dataclass
class ModeVariational:
    """q(b_k), q(rho_k) and the point estimates of gamma_k, beta_k."""

    mu_b: float
    sigma_b_sq: float
    alpha_rho: float
    beta_rho: float
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def pack(self):
        return np.concatenate([[self.mu_b, np.log(self.sigma_b_sq), np.log(self.alpha_rho),
                                np.log(self.beta_rho)], self.gamma, self.beta])

    @classmethod
    def unpack(cls, theta, n_static):
        return cls(float(theta[0]), float(np.exp(theta[1])), float(np.exp(theta[2])),
                   float(np.exp(theta[3])), np.array(theta[4:4 + n_static], float),
                   np.array(theta[4 + n_static:], float))

    def to_dict(self):
        return {"mu_b": self.mu_b, "sigma_b_sq": self.sigma_b_sq, "alpha_rho": self.alpha_rho,
                "beta_rho": self.beta_rho, "gamma": self.gamma.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mu_b"], d["sigma_b_sq"], d["alpha_rho"], d["beta_rho"],
                   np.array(d["gamma"], float), np.array(d["beta"], float))


@dataclass
class VariationalState:
    alpha_tilde: np.ndarray
    modes: list

    def to_dict(self):
        return {"alpha_tilde": np.asarray(self.alpha_tilde).tolist(),
                "modes": [m.to_dict() for m in self.modes]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["alpha_tilde"], float), [ModeVariational.from_dict(m) for m in d["modes"]])

    @classmethod
    def from_priors(cls, priors, n_static, n_sensors):
        modes = [ModeVariational(float(priors.mu_b[k]), float(priors.sigma_b_sq[k]),
                                 float(priors.alpha_rho[k]), float(priors.beta_rho[k]),
                                 np.zeros(n_static), np.zeros(n_sensors))
                 for k in range(priors.alpha.size)]
        return cls(priors.alpha.copy(), modes)


# --- Monte Carlo ELBO -----------------------------------------------------------------


@dataclass
class TrainingUnit:
    """One historical unit: its event record, observed mode and signal posteriors.

    ``posteriors`` holds one SignalPosterior per sensor, all on the same
    integration grid spanning ``[0, V]``.
    """

    record: EventRecord
    mode: int
    posteriors: list


def unit_signal_posteriors(models, unit_id, V, n_steps=DEFAULT_GRID_STEPS):
    """Exact CMGP posteriors of a training unit's signals on ``[0, V]``."""
    grid = integration_grid(0.0, V, n_steps)
    out = []
    for model in models:
        sk = model.hyper.smoothing.get(unit_id, model.hyper.smoothing.get(str(unit_id)))
        if sk is None:
            raise ContractError(f"unit {unit_id!r} missing from CMGP for sensor {model.sensor!r}")
        out.append(cmgp.predict_f(model, sk, None, grid))
    return out


class _ModeSamples:
    """Frozen Monte Carlo draws for all units of one mode (common random numbers)."""

    def __init__(self, units, n_mc, rng):
        self.n_units = len(units)
        self.delta = np.array([u.record.delta for u in units], float)
        self.V = np.array([u.record.V for u in units], float)
        self.x = np.array([u.record.x for u in units], float).reshape(self.n_units, -1)
        self.times = np.array([u.posteriors[0].times for u in units])           # (I, G)
        paths = []
        for u in units:
            per_sensor = []
            for post in u.posteriors:
                if post.times.shape != u.posteriors[0].times.shape or not np.allclose(
                        post.times, u.posteriors[0].times):
                    raise ContractError("all sensor posteriors of a unit must share one grid")
                per_sensor.append(cmgp._draw(post, n_mc, rng))               # (S, G)
            paths.append(np.stack(per_sensor, axis=1))                           # (S, J, G)
        self.f = np.stack(paths) if paths else np.zeros((0, n_mc, 0, 0))      # (I, S, J, G)
        self.u_rho = (np.arange(n_mc) + rng.uniform(size=n_mc)) / n_mc          # stratified
        rng.shuffle(self.u_rho)

    def expected_loglik(self, mv):
        """E_q[sum_i delta_i log h_i(V_i) - int_0^{V_i} h_i] for one mode."""
        if self.n_units == 0:
            return 0.0
        rho = stats.gamma.ppf(self.u_rho, mv.alpha_rho) / mv.beta_rho            # (S,)
        lin_x = self.x @ mv.gamma if mv.gamma.size else np.zeros(self.n_units)
        bf = np.einsum("j,isjg->isg", mv.beta, self.f)                           # (I, S, G)
        e_rho = mv.alpha_rho / mv.beta_rho
        at_event = mv.mu_b + e_rho * self.V + lin_x + bf[:, :, -1].mean(axis=1)
        integrand = np.exp(bf + rho[None, :, None] * self.times[:, None, :])
        H = np.trapezoid(integrand, self.times[:, None, :], axis=-1).mean(axis=1)  # (I,)
        scale = np.exp(mv.mu_b + 0.5 * mv.sigma_b_sq + lin_x)
        return float((self.delta * at_event).sum() - (scale * H).sum())


class ELBO:
    """Monte Carlo ELBO with draws frozen at construction."""

    def __init__(self, units, priors, n_mc=64, seed=0):
        if int(n_mc) < 1:
            raise ContractError("n_mc must be >= 1")
        self.priors = priors
        K = priors.alpha.size
        self.counts = np.zeros(K)
        by_mode = [[] for _ in range(K)]
        for u in units:
            if not 0 <= u.mode < K:
                raise ContractError(f"unit mode {u.mode!r} outside 0..{K - 1}")
            if not u.posteriors:
                raise ContractError("every unit needs signal posteriors")
            by_mode[u.mode].append(u)
            self.counts[u.mode] += 1
        ss = np.random.SeedSequence(seed)
        self.samples = [_ModeSamples(us, int(n_mc), np.random.default_rng(s))
                        for us, s in zip(by_mode, ss.spawn(K))]

    def mode_term(self, k, mv):
        """Mode k's expected log-likelihood minus its KL penalties."""
        p = self.priors
        return (self.samples[k].expected_loglik(mv)
                - kl_normal((mv.mu_b, mv.sigma_b_sq), (p.mu_b[k], p.sigma_b_sq[k]))
                - kl_gamma((mv.alpha_rho, mv.beta_rho), (p.alpha_rho[k], p.beta_rho[k])))

    def z_term(self, alpha_tilde):
        return float(self.counts @ expected_log_pi(alpha_tilde)) - kl_dirichlet(alpha_tilde, self.priors.alpha)

    def __call__(self, state):
        return self.z_term(state.alpha_tilde) + sum(self.mode_term(k, mv) for k, mv in enumerate(state.modes))

    def expected_loglik(self, state):
        """Expected log-likelihood alone (event times plus observed modes)."""
        return (float(self.counts @ expected_log_pi(state.alpha_tilde))
                + sum(s.expected_loglik(mv) for s, mv in zip(self.samples, state.modes)))


def elbo_estimate(state, priors, units, n_mc=64, seed=0):
    return ELBO(units, priors, n_mc, seed)(state)


@dataclass
class VIConfig:
    n_mc: int = 64
    seed: int = 0
    max_iter: int = 4000
    xatol: float = 1e-5
    fatol: float = 1e-7


def _initial_simplex(theta0, units_f_scale, n_static):
    steps = np.concatenate([[0.5, 0.5, 0.5, 0.5], np.full(n_static, 0.1),
                            0.5 / np.maximum(units_f_scale, 1e-8)])
    simplex = np.tile(theta0, (theta0.size + 1, 1))
    simplex[1:] += np.diag(steps)
    return simplex


def fit_variational(units, priors, config=None, init=None):
    """Fit q(Pi), q(b_k), q(rho_k) and the Cox coefficients.

    ``alpha_tilde`` takes its exact conjugate value; each mode's remaining
    parameters maximise that mode's ELBO term by Nelder-Mead on the frozen
    Monte Carlo surface. Returns ``(state, traces)`` where ``traces[k]``
    holds the best ELBO term after each accepted simplex iteration.
    """
    config = config or VIConfig()
    elbo = ELBO(units, priors, config.n_mc, config.seed)
    n_static = units[0].record.x.size if units else 0
    n_sensors = len(units[0].posteriors) if units else 0
    state = init or VariationalState.from_priors(priors, n_static, n_sensors)
    alpha_tilde = dirichlet_conjugate_update(priors.alpha, elbo.counts)
    modes, traces = [], []
    for k, mv0 in enumerate(state.modes):
        samples = elbo.samples[k]
        f_scale = (np.abs(samples.f).mean(axis=(0, 1, 3)) if samples.n_units
                   else np.ones(n_sensors))
        theta0 = mv0.pack()
        trace = []

        def negative(theta, k=k):
            val = elbo.mode_term(k, ModeVariational.unpack(theta, n_static))
            return -val if np.isfinite(val) else np.inf

        f0 = negative(theta0)
        if not np.isfinite(f0):
            raise NumericalError(f"ELBO is non-finite at the initial point of mode {k}",
                                 {"theta": theta0.tolist()})
        trace.append(-f0)

        def record(xk, k=k):
            trace.append(-negative(xk))

        res = optimize.minimize(negative, theta0, method="Nelder-Mead", callback=record,
                                options={"maxiter": config.max_iter, "maxfev": 4 * config.max_iter,
                                         "xatol": config.xatol, "fatol": config.fatol,
                                         "adaptive": True,
                                         "initial_simplex": _initial_simplex(theta0, f_scale, n_static)})
        theta = res.x if np.isfinite(res.fun) and res.fun <= f0 else theta0
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"variational optimisation diverged for mode {k}", {"trace": trace[-20:]})
        modes.append(ModeVariational.unpack(theta, n_static))
        traces.append(trace)
    return VariationalState(alpha_tilde, modes), traces
