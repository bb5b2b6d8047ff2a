"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; criterion 6 runs the
full default study and takes a few minutes.
"""

import json
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

import test_cmgp
import test_inference
from conftest import toy_group
from mfgpcox import cli
from mfgpcox._linalg import jitter_cholesky
from mfgpcox.cmgp import sparse_marginal_loglik
from mfgpcox.inference import (ELBO, Priors, VariationalState, VIConfig, dirichlet_conjugate_update,
                               fit_variational, kl_dirichlet, kl_gamma, kl_normal)
from mfgpcox.kernels import (LatentKernelParams as LK, SmoothingKernelParams as SK, gram_ff, gram_fu,
                             gram_uu, k_ff, k_fu, quad_k_ff, quad_k_fu)
from mfgpcox.prediction import SurvivalCurve, marginal_survival, rul_estimate
from mfgpcox.simulate import gen_failure_time
from mfgpcox.survival import (CoxBaselineParams as Base, CoxCoefficients as Coef, EventRecord,
                              cumulative_hazard, event_loglik, survival_prob)

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


def verdict(request, number, title, checks):
    """Print one PASS/FAIL line for the criterion, then fail on any failed check."""
    failed = [label for label, ok in checks if not ok]
    line = f"criterion {number} ({title}): {'PASS' if not failed else 'FAIL'}"
    if failed:
        line += " - " + "; ".join(failed)
    request.config.pluginmanager.getplugin("terminalreporter").write_line(line)
    assert not failed, line


def test_criterion_1_kernels(request):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(500):
        lk = LK(rng.uniform(0.1, 20))
        a, b = SK(rng.uniform(-5, 5), rng.uniform(0.1, 20)), SK(rng.uniform(-5, 5), rng.uniform(0.1, 20))
        t = rng.uniform(0, 50)
        tp = t + rng.uniform(-50, 50)
        worst = max(worst, abs(quad_k_fu(t, tp, lk, a) - k_fu(t, tp, lk, a)),
                    abs(quad_k_ff(t, tp, lk, a, b) - k_ff(t, tp, lk, a, b)))
    psd = True
    for _ in range(50):
        lk = LK(rng.uniform(0.1, 20))
        w = np.sort(rng.uniform(0, 50, 6))
        outs = [(np.sort(rng.uniform(0, 50, 5)), SK(rng.uniform(-5, 5), rng.uniform(0, 20))) for _ in range(3)]
        blocks = [[gram_uu(w, lk)] + [gram_fu(t, w, lk, sk).T for t, sk in outs]]
        for ta, sa in outs:
            blocks.append([gram_fu(ta, w, lk, sa)] + [gram_ff(ta, tb, lk, sa, sb) for tb, sb in outs])
        K = np.block(blocks)
        jitter_cholesky(K, start=1e-8 * np.trace(K) / K.shape[0])
        psd &= bool(np.linalg.eigvalsh(K).min() > -1e-8 * np.abs(K).max())
    verdict(request, 1, "kernel oracle and PSD",
            [(f"max oracle gap {worst:.2e} >= 1e-6", worst < 1e-6), ("Gram matrix not PSD", psd)])


def test_criterion_2_sparse_gp(request):
    data, hyper = toy_group(seed=0)
    assert len(data) == 3 and all(t.size == 15 for t, _ in data.values())
    grid = test_cmgp.data_range_grid(data, 200, pad=2 * hyper.lam)
    gap = abs(sparse_marginal_loglik(data, hyper, grid) - test_cmgp.exact_loglik(data, hyper))
    try:
        test_cmgp.test_conditioning_matches_dense_oracle()
        conditioning = True
    except AssertionError:
        conditioning = False
    verdict(request, 2, "sparse GP fidelity",
            [(f"FITC gap {gap:.2e} >= 1e-3", gap < 1e-3),
             ("conditioning differs from dense oracle by >= 1e-6", conditioning)])


def test_criterion_3_variational(request):
    mc_kl, gamma_sr = test_inference.mc_kl, test_inference.gamma_sr
    checks = []
    for name, closed, q, p in [
        ("normal", kl_normal((0.4, 0.5), (0.0, 2.0)), stats.norm(0.4, math.sqrt(0.5)), stats.norm(0.0, math.sqrt(2.0))),
        ("gamma", kl_gamma((3.0, 1.0), (2.0, 1.0)), gamma_sr(3.0, 1.0), gamma_sr(2.0, 1.0)),
        ("dirichlet", kl_dirichlet([2.0, 1.0, 3.0], [1.0, 1.0, 1.0]),
         stats.dirichlet([2.0, 1.0, 3.0]), stats.dirichlet([1.0, 1.0, 1.0])),
    ]:
        est, se = mc_kl(q, p)
        checks.append((f"KL {name}: |{closed:.5f} - {est:.5f}| >= 3 SE", abs(closed - est) < 3 * se))

    units = (test_inference.make_units(-4.0, 0.01, 0.5, 6, 0)
             + test_inference.make_units(-4.0, 0.01, 0.5, 3, 1, mode=1))
    priors = Priors(np.full(2, -4.0), np.ones(2), np.full(2, 2.0), np.full(2, 200.0), np.array([1.0, 2.0]))
    elbo = ELBO(units, priors, n_mc=8, seed=0)
    state = VariationalState.from_priors(priors, 0, 1)
    state.alpha_tilde = dirichlet_conjugate_update(priors.alpha, elbo.counts)
    best = elbo(state)
    argmax = True
    for k in range(2):
        for factor in (0.9, 0.99, 1.01, 1.1):
            alt = state.alpha_tilde.copy()
            alt[k] *= factor
            argmax &= bool(elbo(VariationalState(alt, state.modes)) < best)
    checks.append(("conjugate update is not the ELBO argmax", argmax))

    _, traces = fit_variational(units, priors, VIConfig(n_mc=8, seed=0, max_iter=1000))
    checks.append(("ELBO trace decreases", all(np.all(np.diff(t) >= 0) for t in traces)))
    verdict(request, 3, "variational inference", checks)


def test_criterion_4_simulator(request):
    def sample(hazard, t_max, seed):
        return np.array([gen_failure_time(hazard, t_max, s) for s in np.random.SeedSequence(seed).spawn(2000)])

    const = stats.kstest(sample(lambda t: np.full(np.shape(t), 0.1), 100.0, 0), stats.expon(scale=10.0).cdf)
    rho = 0.02
    linear = stats.kstest(sample(lambda t: rho * np.asarray(t), 40.0, 1), lambda t: 1 - np.exp(-rho * t**2 / 2))
    verdict(request, 4, "failure-time sampler",
            [(f"constant hazard KS {const.statistic:.4f}", const.statistic < 0.05),
             (f"linear hazard KS {linear.statistic:.4f}", linear.statistic < 0.05)])


def test_criterion_5_survival(request):
    times = np.linspace(0.0, 60.0, 6001)             # trapezoid step 0.01
    path = (times, np.zeros((0, times.size)))
    none = Coef()
    checks = []
    for b, rho in [(math.log(0.05), 0.0), (math.log(0.02), 0.03)]:
        def H(t0, t1, b=b, rho=rho):
            return math.exp(b) * (t1 - t0) if rho == 0 else math.exp(b) / rho * (math.exp(rho * t1) - math.exp(rho * t0))
        base = Base(b, rho)
        for t0, t1 in [(0.0, 10.0), (5.0, 30.0), (20.0, 60.0)]:
            ch = cumulative_hazard(t0, t1, base, none, None, *path)
            sp = survival_prob(t0, t1 - t0, base, none, None, *path)
            checks.append((f"H({t0}, {t1}) rho={rho}", abs(ch - H(t0, t1)) < 1e-3))
            checks.append((f"S({t0}, {t1}) rho={rho}", abs(sp - math.exp(-H(t0, t1))) < 1e-3))
        for V in (10.0, 40.0):
            exact_event = b + rho * V - H(0.0, V)
            checks.append((f"event loglik V={V} rho={rho}",
                           abs(event_loglik(EventRecord(V, 1), base, none, *path) - exact_event) < 1e-3))
            checks.append((f"censored loglik V={V} rho={rho}",
                           abs(event_loglik(EventRecord(V, 0), base, none, *path) + H(0.0, V)) < 1e-3))
    for rate in (0.5, 1.0):
        g = np.linspace(0, 40, 4001)
        S = np.exp(-rate * g)
        rul = rul_estimate(SurvivalCurve(0.0, g, S[None], S, S, S))
        checks.append((f"constant-hazard RUL {rul:.5f} vs {1 / rate}", abs(rul - 1 / rate) < 1e-3))
    b, rho = math.log(0.05), 0.05
    g = np.linspace(0, 100, 10001)
    S = np.exp(-math.exp(b) / rho * np.expm1(rho * g))
    exact = stats.gompertz(rho / math.exp(b), scale=1 / rho).mean()
    rul = rul_estimate(SurvivalCurve(0.0, g, S[None], S, S, S))
    checks.append((f"exponential-baseline RUL {rul:.5f} vs {exact:.5f}", abs(rul - exact) < 1e-3))
    verdict(request, 5, "survival and RUL closed forms", checks)


def _metrics(summary, label, metric):
    return summary[label][metric]["mean"]


def test_criterion_6_default_study(request, tmp_path):
    cfg = cli.load_run_config()
    log = lambda msg: None  # noqa: E731
    cli.cmd_simulate(cfg, tmp_path / "data", log=log)
    cli.cmd_fit(cfg, tmp_path / "data", tmp_path / "model", log=log)
    cli.cmd_predict(cfg, tmp_path / "model", tmp_path / "data", tmp_path / "pred", log=log)
    cli.cmd_evaluate(cfg, tmp_path / "pred", tmp_path / "data" / "truth.json", tmp_path / "eval", log=log)
    summary = json.loads((tmp_path / "eval" / "metrics_summary.json").read_text())
    labels = ["t20", "t50", "t75"]
    mode_err = [_metrics(summary, s, "mode_error") for s in labels]
    rul_err = [_metrics(summary, s, "rul_abs_error") for s in labels]
    cover = [_metrics(summary, s, "coverage") for s in labels]
    fmt = lambda v: ", ".join(f"{x:.4g}" for x in v)  # noqa: E731
    verdict(request, 6, "default study", [
        (f"mode error not non-increasing: {fmt(mode_err)}", mode_err[0] >= mode_err[1] >= mode_err[2]),
        (f"mean P(true mode) at t*=50 is {1 - mode_err[1]:.4f} < 0.95", 1 - mode_err[1] >= 0.95),
        (f"RUL error not non-increasing: {fmt(rul_err)}", rul_err[0] >= rul_err[1] >= rul_err[2]),
        (f"coverage outside [0.85, 0.99]: {fmt(cover)}", all(0.85 <= c <= 0.99 for c in cover)),
    ])


def test_criterion_7_mixture(request):
    def curve(values):
        v = np.asarray(values, float)
        return SurvivalCurve(0.0, np.arange(v.size, dtype=float), np.tile(v, (4, 1)), v, v, v)

    half = marginal_survival([curve([1.0, 0.8]), curve([1.0, 0.4])], [0.5, 0.5], seed=0).point[1]
    # 0.6 has no binary representation; the exact mixture of the two stored doubles lies
    # halfway between two neighbouring doubles, so the correctly rounded result is required
    exact = Fraction(0.5) * Fraction(0.8) + Fraction(0.5) * Fraction(0.4)
    rounded = float(exact)
    a, b = curve([1.0, 0.9, 0.3]), curve([1.0, 0.5, 0.1])
    only_a = marginal_survival([a, b], [1.0, 0.0], seed=0)
    verdict(request, 7, "mixture identity", [
        (f"(0.5, 0.5) mixture {half!r} is not the correctly rounded {rounded!r}", half == rounded),
        (f"(0.5, 0.5) mixture {half!r} is more than one ulp from 0.6", abs(half - 0.6) <= np.spacing(0.6)),
        ("(1, 0) mixture differs from the mode-1 curve",
         np.array_equal(only_a.point, a.point) and np.array_equal(only_a.samples, a.samples)),
    ])


def test_criterion_8_determinism(request, tmp_path):
    config = tmp_path / "small.toml"
    config.write_text(SMALL_TOML)

    def run(root, threads):
        c = ["--config", str(config), "--threads", str(threads)]
        for argv in (["simulate", "--out", root / "data"],
                     ["fit", "--data", root / "data", "--out", root / "model"],
                     ["predict", "--model", root / "model", "--data", root / "data", "--out", root / "pred"],
                     ["evaluate", "--predictions", root / "pred", "--truth", root / "data" / "truth.json",
                      "--out", root / "eval"]):
            assert cli.main([argv[0]] + c + [str(a) for a in argv[1:]]) == 0
        return {p.name: p.read_bytes() for p in sorted((root / "eval").iterdir())}

    one, two = run(tmp_path / "a", 1), run(tmp_path / "b", 2)
    verdict(request, 8, "determinism", [
        ("metric files differ between --threads 1 and 2", one == two and "metrics_units.csv" in one),
    ])
