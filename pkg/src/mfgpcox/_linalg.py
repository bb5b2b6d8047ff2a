"""Cholesky with a jitter ladder and small triangular-solve helpers."""

import numpy as np
from scipy import linalg

from .exceptions import NumericalError

JITTER_START = 1e-8
JITTER_MAX = 1e-2
_ladder = {"start": JITTER_START, "stop": JITTER_MAX}


def set_jitter_ladder(start=JITTER_START, stop=JITTER_MAX):
    """Process-wide default ladder, as relative multiples of ``trace/n``."""
    if not 0 < start <= stop:
        raise ValueError("jitter ladder needs 0 < start <= stop")
    _ladder.update(start=float(start), stop=float(stop))


def jitter_cholesky(K, context=None, start=None, stop=None):
    """Lower Cholesky factor of ``K + jitter * I``.

    Jitter starts at ``start * trace/n`` and grows x10 up to ``stop * trace/n``;
    ``start=0`` tries the exact matrix first.
    Returns ``(L, jitter)``; raises NumericalError when even the largest
    jitter fails.
    """
    start = _ladder["start"] if start is None else start
    stop = _ladder["stop"] if stop is None else stop
    K = np.asarray(K, float)
    n = K.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    if not np.all(np.isfinite(K)):
        raise NumericalError("matrix has non-finite entries", context)
    scale = max(np.trace(K) / n, np.finfo(float).tiny)
    level = start
    while level <= stop * (1 + 1e-12):
        jitter = level * scale
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            return L, jitter
        except linalg.LinAlgError:
            level = level * 10.0 if level > 0 else _ladder["start"]
    ctx = dict(context or {})
    ctx["max_jitter"] = stop * scale
    raise NumericalError("Cholesky failed after maximum jitter", ctx)


def solve_lower(L, B):
    return linalg.solve_triangular(L, B, lower=True, check_finite=False)


def solve_upper_t(L, B):
    """Solve ``L^T X = B`` for lower-triangular ``L``."""
    return linalg.solve_triangular(L, B, lower=True, trans="T", check_finite=False)


def chol_solve(L, B):
    return solve_upper_t(L, solve_lower(L, B))


def gaussian_logpdf_chol(r, L):
    """Log density of residual ``r`` under N(0, L L^T)."""
    a = solve_lower(L, r)
    return -0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * r.size * np.log(2 * np.pi)
