"""Synthetic degradation data with mode-dependent signals and failure times.

Each unit draws random basis coefficients ``B ~ N(mean, cov)`` per sensor;
its noiseless signal is ``Z(t)' B`` and its hazard
``exp(b + rho t + sum_j beta_j Z_j(t)' B_j)``. Failure times are drawn from
``h(t) S(t)`` by rejection sampling.

Files written by :func:`make_dataset`::

    <out>/train/units.csv      unit_id, failure_mode, event_time, event_indicator
    <out>/train/signals.csv    unit_id, sensor_id, time, value
    <out>/test/units.csv       as train (true values)
    <out>/test/t<t*>/units.csv state at t*: failed units (indicator 1) or censored at t*
    <out>/test/t<t*>/signals.csv  observations with time <= t*
    <out>/truth.json           true modes, RULs and everything needed to rebuild S_true
"""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .exceptions import ConfigError, ContractError, NumericalError

# --- basis library --------------------------------------------------------------------


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


BASIS = {
    # name: f(t, scale, shape); every member is 0 at t = 0
    "linear": lambda t, s, p: t / s,
    "quadratic": lambda t, s, p: (t / s) ** 2,
    "power": lambda t, s, p: (t / s) ** p,
    "exp_growth": lambda t, s, p: np.expm1(t / s),
    "saturating": lambda t, s, p: -np.expm1(-t / s),
    "logistic": lambda t, s, p: _logistic((t - p) / s) - _logistic(-p / s),
}


@dataclass
class BasisFunction:
    kind: str
    scale: float = 1.0
    shape: float = 1.0

    def __call__(self, t):
        return BASIS[self.kind](np.asarray(t, float), self.scale, self.shape)


@dataclass
class SensorSpec:
    basis: list
    coef_mean: list
    coef_cov: list
    noise_var: float
    beta: float

    def design(self, t):
        """``len(t) x p`` matrix of basis values."""
        return np.column_stack([bf(t) for bf in self.basis])

    def signal(self, t, B):
        return self.design(np.atleast_1d(t)) @ np.asarray(B, float)


@dataclass
class ModeSpec:
    b: float
    rho: float
    sensors: list


@dataclass
class SimConfig:
    modes: list
    n_train: int = 50
    n_test: int = 10
    cadence: float = 2.5
    t_stars: tuple = (20.0, 50.0, 75.0)
    t_max: float = 400.0
    censor_rate: float = 0.0
    seed: int = 2024

    @property
    def n_modes(self):
        return len(self.modes)

    @property
    def n_sensors(self):
        return len(self.modes[0].sensors)

    def validate(self):
        if not self.modes:
            raise ConfigError("at least one failure mode is required")
        J = self.n_sensors
        for k, m in enumerate(self.modes):
            if len(m.sensors) != J:
                raise ConfigError(f"mode {k} has {len(m.sensors)} sensors, expected {J}")
            if m.rho < 0:
                raise ConfigError(f"mode {k}: rho must be non-negative")
            for j, s in enumerate(m.sensors):
                p = len(s.basis)
                mean, cov = np.asarray(s.coef_mean, float), np.asarray(s.coef_cov, float)
                if mean.shape != (p,) or cov.shape != (p, p):
                    raise ConfigError(f"mode {k} sensor {j}: coefficient shapes do not match the basis")
                if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
                    raise ContractError(f"mode {k} sensor {j}: coefficient covariance is not PSD")
                if s.noise_var < 0:
                    raise ConfigError(f"mode {k} sensor {j}: noise variance must be >= 0")
                for bf in s.basis:
                    if bf.kind not in BASIS:
                        raise ConfigError(f"unknown basis kind {bf.kind!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("unit counts must be >= 1")
        if self.cadence <= 0:
            raise ConfigError("cadence must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        modes = []
        for m in d.pop("modes"):
            sensors = [SensorSpec([BasisFunction(**bf) for bf in s.pop("basis")], **s)
                       for s in m.pop("sensors")]
            modes.append(ModeSpec(sensors=sensors, **m))
        if "t_stars" in d:
            d["t_stars"] = tuple(float(t) for t in d["t_stars"])
        return cls(modes=modes, **d).validate()


def default_config(**overrides):
    """Two modes, two sensors.

    Mode 0 degrades along accelerating polynomial / logistic-ramp shapes,
    mode 1 along saturating / power-law shapes. Initial slopes are matched so
    signals overlap early and separate as degradation progresses.
    """
    mode0 = ModeSpec(b=-8.0, rho=0.015, sensors=[
        SensorSpec([BasisFunction("linear", 50.0), BasisFunction("quadratic", 50.0)],
                   [1.0, 0.5], [[0.09, 0.0], [0.0, 0.0225]], 0.01, 0.65),
        SensorSpec([BasisFunction("linear", 100.0), BasisFunction("logistic", 15.0, 80.0)],
                   [0.5, 2.0], [[0.0225, 0.0], [0.0, 0.36]], 0.01, 0.42),
    ])
    mode1 = ModeSpec(b=-8.1, rho=0.019, sensors=[
        SensorSpec([BasisFunction("saturating", 40.0)], [0.8], [[0.0576]], 0.01, 0.75),
        SensorSpec([BasisFunction("power", 100.0, 1.5)], [2.0], [[0.36]], 0.01, 0.58),
    ])
    cfg = SimConfig(modes=[mode0, mode1])
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


# --- units ------------------------------------------------------------------------------


@dataclass
class SimulatedUnit:
    unit_id: str
    mode: int
    B: list                       # one coefficient vector per sensor
    observations: list            # one (times, values) per sensor
    T: float = float("nan")
    V: float = float("nan")
    delta: int = 1
    true_rul: dict = field(default_factory=dict)

    def view(self, t_star):
        """Observations with ``time <= min(t_star, V)``."""
        cut = min(t_star, self.V)
        return [(t[t <= cut], y[t <= cut]) for t, y in self.observations]


def unit_log_hazard(config, mode, B, t):
    m = config.modes[mode]
    t = np.asarray(t, float)
    out = m.b + m.rho * t
    for s, coef in zip(m.sensors, B):
        out = out + s.beta * s.signal(t, coef)
    return out


def unit_hazard(config, mode, B):
    return lambda t: np.exp(unit_log_hazard(config, mode, B, t))


def gen_signals(config, mode, n_units, seed, prefix="u"):
    """Draw coefficients and noisy observations on ``[0, t_max]`` at the configured cadence."""
    config.validate()
    rng = np.random.default_rng(seed)
    times = np.arange(0.0, config.t_max + 1e-9, config.cadence)
    units = []
    for i, child in enumerate(rng.spawn(n_units)):
        Bs, obs = [], []
        for s in config.modes[mode].sensors:
            B = child.multivariate_normal(np.asarray(s.coef_mean, float),
                                          np.asarray(s.coef_cov, float), method="eigh")
            y = s.signal(times, B)
            if s.noise_var > 0:
                y = y + child.normal(0.0, np.sqrt(s.noise_var), times.size)
            Bs.append(B)
            obs.append((times.copy(), y))
        units.append(SimulatedUnit(f"{prefix}{mode}_{i:03d}", mode, Bs, obs))
    return units


def _density_table(hazard, t_max, step):
    grid = np.arange(0.0, t_max + 0.5 * step, step)
    h = hazard(grid)
    H = np.concatenate([[0.0], np.cumsum(0.5 * (h[1:] + h[:-1]) * np.diff(grid))])
    return grid, h * np.exp(-H), np.exp(-H)


def gen_failure_time(hazard, t_max, seed, step=0.01, max_rejections=10**6):
    """One draw from ``h(t) exp(-int_0^t h)`` on ``[0, t_max]`` by rejection sampling.

    Proposals are uniform on ``[0, t_max]`` under an envelope of 1.1 times the
    tabulated density maximum.
    """
    grid, dens, surv = _density_table(hazard, t_max, step)
    if surv[-1] > 1e-3:
        raise ConfigError(f"t_max={t_max} leaves {surv[-1]:.3g} of the failure-time mass beyond it")
    rng = np.random.default_rng(seed)
    envelope = 1.1 * dens.max()
    rejected = 0
    while rejected < max_rejections:
        batch = 256
        t = rng.uniform(0.0, t_max, batch)
        u = rng.uniform(0.0, envelope, batch)
        accept = np.nonzero(u <= np.interp(t, grid, dens))[0]
        if accept.size:
            return float(t[accept[0]])
        rejected += batch
    raise NumericalError("rejection sampling exceeded the rejection budget",
                         {"t_max": t_max, "envelope": envelope})


def true_survival(config, unit, t_star, grid, step=0.01):
    """Exact conditional survival ``S(t* + grid | t*)`` from the noiseless signal."""
    grid = np.atleast_1d(np.asarray(grid, float))
    end = t_star + (grid.max() if grid.size else 0.0)
    n = max(int(np.ceil((end - t_star) / step)), 1)
    fine = np.linspace(t_star, end, n + 1)
    h = np.exp(unit_log_hazard(config, unit.mode, unit.B, fine))
    H = np.concatenate([[0.0], np.cumsum(0.5 * (h[1:] + h[:-1]) * np.diff(fine))])
    return np.exp(-np.interp(t_star + grid, fine, H))


def true_rul(config, unit, t_star, step=0.01, tail=1e-10):
    """``int_{t*}^inf S(l | t*) dl`` on a fine grid, stopped once S < ``tail``."""
    horizon = max(config.t_max - t_star, 1.0)
    while True:
        n = int(np.ceil(horizon / step))
        offsets = np.linspace(0.0, horizon, n + 1)
        S = true_survival(config, unit, t_star, offsets, step)
        if S[-1] < tail:
            return float(np.trapezoid(S, offsets))
        horizon *= 2.0


def _finalize(config, units, seed_seq):
    for unit, ss in zip(units, seed_seq.spawn(len(units))):
        rng = np.random.default_rng(ss)
        unit.T = gen_failure_time(unit_hazard(config, unit.mode, unit.B), config.t_max, rng)
        unit.V, unit.delta = unit.T, 1
        if config.censor_rate > 0:
            C = rng.exponential(1.0 / config.censor_rate)
            if C < unit.T:
                unit.V, unit.delta = C, 0
        unit.observations = [(t[t <= unit.V], y[t <= unit.V]) for t, y in unit.observations]
    return units


def simulate_units(config):
    """Train and test units for every mode, deterministic in ``config.seed``."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    train, test = [], []
    for k, ss in enumerate(root.spawn(config.n_modes)):
        s_tr, s_te, s_T1, s_T2 = ss.spawn(4)
        tr = gen_signals(config, k, config.n_train, s_tr, prefix="train")
        te = gen_signals(config, k, config.n_test, s_te, prefix="test")
        train += _finalize(config, tr, s_T1)
        test += _finalize(config, te, s_T2)
    for unit in test:
        for ts in config.t_stars:
            if unit.T > ts:
                unit.true_rul[float(ts)] = true_rul(config, unit, ts)
    return train, test


def t_star_label(t_star):
    return f"t{float(t_star):g}"


def dataset_files(config):
    """Simulate; returns ``(train, test, {relative path: text})``."""
    train, test = simulate_units(config)
    files = {}
    files["train/units.csv"] = io.units_csv([(u.unit_id, u.mode, u.V, u.delta) for u in train])
    files["train/signals.csv"] = io.signals_csv(_signal_rows(train, None))
    files["test/units.csv"] = io.units_csv([(u.unit_id, u.mode, u.V, u.delta) for u in test])
    for ts in config.t_stars:
        label = t_star_label(ts)
        rows = [(u.unit_id, "", min(u.V, ts), int(u.V <= ts)) for u in test]
        files[f"test/{label}/units.csv"] = io.units_csv(rows)
        files[f"test/{label}/signals.csv"] = io.signals_csv(_signal_rows(test, ts))
    truth = {
        "config": config.to_dict(),
        "units": {u.unit_id: {"mode": u.mode, "failure_time": u.T,
                              "B": [np.asarray(b).tolist() for b in u.B],
                              "true_rul": {t_star_label(k): v for k, v in u.true_rul.items()}}
                  for u in test},
    }
    files["truth.json"] = json.dumps(truth, indent=1, sort_keys=True)
    return train, test, files


def make_dataset(config, out_dir):
    """Simulate and write the dataset files; returns ``(train, test)`` units."""
    train, test, files = dataset_files(config)
    io.write_files_atomic(Path(out_dir), files)
    return train, test


def _signal_rows(units, t_star):
    rows = []
    for u in units:
        obs = u.observations if t_star is None else u.view(t_star)
        for j, (t, y) in enumerate(obs):
            rows.extend((u.unit_id, j, ti, yi) for ti, yi in zip(t, y))
    return rows


def load_truth(path):
    """Truth table with a ``true_survival(unit_id, t_star, grid)`` helper attached."""
    data = json.loads(Path(path).read_text())
    config = SimConfig.from_dict(data["config"]) if data.get("config") else None
    units = {uid: SimulatedUnit(uid, rec["mode"], [np.array(b) for b in rec["B"]], [],
                                rec["failure_time"], rec["failure_time"])
             for uid, rec in data["units"].items()}
    return Truth(config, units, data["units"])


@dataclass
class Truth:
    config: SimConfig
    units: dict
    records: dict

    def mode(self, unit_id):
        return self.records[unit_id]["mode"]

    def rul(self, unit_id, t_star):
        return self.records[unit_id]["true_rul"].get(t_star_label(t_star))

    def survival(self, unit_id, t_star, grid):
        return true_survival(self.config, self.units[unit_id], t_star, grid)
