import numpy as np
import pytest
from hypothesis import settings

from mfgpcox import MFGPCox, default_config
from mfgpcox.cmgp import CMGPHyper
from mfgpcox.kernels import LatentKernelParams, SmoothingKernelParams, gram_ff
from mfgpcox.model import Dataset
from mfgpcox.simulate import make_dataset

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


def dense_gram(data, hyper):
    """Exact ``K_ff`` over every observation of a ``{unit: (t, y)}`` group."""
    lk = LatentKernelParams(hyper.lam)
    units = list(data)
    blocks = [[gram_ff(data[a][0], data[b][0], lk, hyper.smoothing[a], hyper.smoothing[b])
               for b in units] for a in units]
    return np.block(blocks)


def toy_group(seed=0, n_units=3, n_points=15, lam=2.0, sigma_eps_sq=0.05, t_max=10.0):
    """A group sampled from the exact convolved GP prior, plus its hyperparameters."""
    rng = np.random.default_rng(seed)
    smoothing = {f"u{i}": SmoothingKernelParams(float(rng.uniform(0.5, 2.0) * rng.choice([-1, 1])),
                                                float(rng.uniform(0.1, 1.5)))
                 for i in range(n_units)}
    hyper = CMGPHyper(lam, smoothing, sigma_eps_sq)
    times = {u: np.sort(rng.uniform(0, t_max, n_points)) for u in smoothing}
    K = dense_gram({u: (times[u], None) for u in smoothing}, hyper)
    y = rng.multivariate_normal(np.zeros(K.shape[0]), K + sigma_eps_sq * np.eye(K.shape[0]))
    data = {u: (times[u], y[i * n_points:(i + 1) * n_points]) for i, u in enumerate(smoothing)}
    return data, hyper


SMALL_SIM = dict(n_train=8, n_test=3)
SMALL_FIT = dict(n_inducing=10, n_restarts=1, cmgp_max_iter=60, n_mc_fit=16, vi_max_iter=300,
                 n_mc_predict=100, pred_grid=50, random_state=7)


@pytest.fixture(scope="session")
def small_study(tmp_path_factory):
    """A small simulated dataset and a model fitted to it (shared, read-only)."""
    root = tmp_path_factory.mktemp("study")
    cfg = default_config(seed=7, **SMALL_SIM)
    train, test = make_dataset(cfg, root)
    est = MFGPCox(**SMALL_FIT).fit(Dataset.from_dir(root / "train"))
    return {"root": root, "config": cfg, "train": train, "test": test, "model": est}
