"""Cox proportional hazards with an exponential baseline.

``h(t) = exp(b + rho t) exp(gamma' x + sum_j beta_j f_j(t))``. Sensor paths
are passed as ``(times, f_path)`` with ``f_path`` shaped ``(J, len(times))``;
integrals use the trapezoid rule on those nodes.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_nonnegative, check_vector
from .exceptions import ContractError

DEFAULT_GRID_STEPS = 200


@dataclass(frozen=True)
class CoxBaselineParams:
    b: float
    rho: float

    def __post_init__(self):
        if not np.isfinite(self.b):
            raise ContractError("baseline intercept b must be finite")
        check_nonnegative(self.rho, "rho")


@dataclass(frozen=True)
class CoxCoefficients:
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "gamma", check_vector(self.gamma, "gamma"))
        object.__setattr__(self, "beta", check_vector(self.beta, "beta"))


@dataclass(frozen=True)
class EventRecord:
    V: float
    delta: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not np.isfinite(self.V) or self.V <= 0:
            raise ContractError(f"event time must be positive, got {self.V!r}")
        if self.delta not in (0, 1):
            raise ContractError(f"event indicator must be 0 or 1, got {self.delta!r}")
        object.__setattr__(self, "x", check_vector(self.x, "x"))


def static_term(coef, x):
    """``gamma' x``; zero when the model has no static covariates."""
    x = np.zeros(0) if x is None else np.asarray(x, float)
    if coef.gamma.size != x.size:
        raise ContractError(f"gamma has {coef.gamma.size} entries but x has {x.size}")
    return float(coef.gamma @ x) if x.size else 0.0


def hazard(t, base, coef, x, f_t):
    f_t = np.atleast_1d(np.asarray(f_t, float))
    if f_t.shape[0] != coef.beta.size:
        raise ContractError(f"expected {coef.beta.size} sensor values, got {f_t.shape[0]}")
    return float(np.exp(base.b + base.rho * t + static_term(coef, x) + coef.beta @ f_t))


def _check_path(times, f_path, n_sensors):
    times = check_vector(times, "times", allow_empty=False)
    f_path = np.asarray(f_path, float)
    if f_path.ndim == 1 and n_sensors <= 1:
        f_path = f_path.reshape(n_sensors, -1) if n_sensors else np.zeros((0, times.size))
    if f_path.shape != (n_sensors, times.size):
        raise ContractError(f"f_path must have shape ({n_sensors}, {times.size}), got {f_path.shape}")
    if np.any(np.diff(times) <= 0):
        raise ContractError("integration grid must be strictly increasing")
    return times, f_path


def _interp_path(t, times, f_path):
    return np.array([np.interp(t, times, row) for row in f_path])


def cumulative_hazard(t_start, t_end, base, coef, x, times, f_path):
    """Trapezoid approximation of ``int_{t_start}^{t_end} h(l) dl`` on the path's grid."""
    if t_end < t_start:
        raise ContractError("t_end must not precede t_start")
    times, f_path = _check_path(times, f_path, coef.beta.size)
    tol = 1e-9 * max(1.0, abs(times[-1]))
    if t_start < times[0] - tol or t_end > times[-1] + tol:
        raise ContractError(f"grid [{times[0]}, {times[-1]}] does not cover [{t_start}, {t_end}]")
    if t_end == t_start:
        return 0.0
    inside = (times > t_start) & (times < t_end)
    nodes = np.concatenate([[t_start], times[inside], [t_end]])
    f_nodes = np.column_stack([_interp_path(t_start, times, f_path), f_path[:, inside],
                               _interp_path(t_end, times, f_path)])
    log_h = base.b + base.rho * nodes + static_term(coef, x) + coef.beta @ f_nodes
    return float(np.trapezoid(np.exp(log_h), nodes))


def survival_prob(t_star, dt, base, coef, x, times, f_path):
    """``P(T > t_star + dt | T > t_star)`` for a fixed sensor path."""
    check_nonnegative(dt, "dt")
    return float(np.exp(-cumulative_hazard(t_star, t_star + dt, base, coef, x, times, f_path)))


def event_loglik(rec, base, coef, times, f_path):
    """``delta log h(V) - int_0^V h``: failures add density, censoring survival only."""
    H = cumulative_hazard(0.0, rec.V, base, coef, rec.x, times, f_path)
    if rec.delta == 0:
        return -H
    f_V = _interp_path(rec.V, *_check_path(times, f_path, coef.beta.size))
    log_h = base.b + base.rho * rec.V + static_term(coef, rec.x) + coef.beta @ f_V
    return float(log_h - H)


def integration_grid(t_start, t_end, n_steps=DEFAULT_GRID_STEPS):
    return np.linspace(t_start, t_end, int(n_steps) + 1)


def cumulative_trapezoid(values, times):
    """Running trapezoid integral along the last axis, starting at 0."""
    values = np.asarray(values, float)
    dt = np.diff(times, axis=-1)
    inc = 0.5 * (values[..., 1:] + values[..., :-1]) * dt
    out = np.zeros(values.shape)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out
