"""Covariance functions of the single-latent convolved multi-output GP.

Each output is ``f_i(t) = int G_i(t - r) u(r) dr`` with an RBF latent process
``u`` of unit variance and a Gaussian smoothing kernel
``G_i(t) = eta_i / sqrt(2 pi xi_i^2) exp(-t^2 / (2 xi_i^2))``. Convolving
Gaussians only adds variances, which gives the closed forms below. ``xi = 0``
is the delta-smoothing limit and needs no special casing.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError


@dataclass(frozen=True)
class LatentKernelParams:
    """RBF latent kernel with length-scale ``lam``."""

    lam: float

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise ContractError(f"length-scale must be positive, got {self.lam!r}")


@dataclass(frozen=True)
class SmoothingKernelParams:
    """Gaussian smoothing kernel: scale ``eta`` (any sign) and width ``xi``."""

    eta: float
    xi: float

    def __post_init__(self):
        if not np.isfinite(self.eta):
            raise ContractError(f"eta must be finite, got {self.eta!r}")
        if not np.isfinite(self.xi) or self.xi < 0:
            raise ContractError(f"xi must be non-negative, got {self.xi!r}")


def _gauss(diff, var):
    return np.exp(-0.5 * np.square(diff) / var)


def k_uu(t, t_prime, lk):
    """Latent-latent covariance ``exp(-(t - t')^2 / (2 lam^2))``."""
    t, t_prime = np.asarray(t, float), np.asarray(t_prime, float)
    return _gauss(t - t_prime, lk.lam**2)


def k_fu(t, w, lk, sk):
    """Output-latent covariance ``cov(f(t), u(w))``."""
    t, w = np.asarray(t, float), np.asarray(w, float)
    var = lk.lam**2 + sk.xi**2
    return sk.eta * lk.lam / np.sqrt(var) * _gauss(t - w, var)


def k_ff(t, t_prime, lk, sk_a, sk_b):
    """Output-output covariance between outputs smoothed by ``sk_a`` and ``sk_b``."""
    t, t_prime = np.asarray(t, float), np.asarray(t_prime, float)
    var = lk.lam**2 + sk_a.xi**2 + sk_b.xi**2
    return sk_a.eta * sk_b.eta * lk.lam / np.sqrt(var) * _gauss(t - t_prime, var)


def gram_uu(w, lk):
    w = np.asarray(w, float)
    return k_uu(w[:, None], w[None, :], lk)


def gram_fu(t, w, lk, sk):
    """``len(t) x len(w)`` cross-covariance block."""
    t, w = np.asarray(t, float), np.asarray(w, float)
    return k_fu(t[:, None], w[None, :], lk, sk)


def gram_ff(t, t_prime, lk, sk_a, sk_b=None):
    sk_b = sk_a if sk_b is None else sk_b
    t, t_prime = np.asarray(t, float), np.asarray(t_prime, float)
    return k_ff(t[:, None], t_prime[None, :], lk, sk_a, sk_b)


def diag_ff(t, lk, sk):
    """Marginal variances ``k_ff(t, t)``; constant in ``t``."""
    t = np.asarray(t, float)
    return np.full(t.shape, sk.eta**2 * lk.lam / np.sqrt(lk.lam**2 + 2 * sk.xi**2))


# --- quadrature oracle (tests only) -------------------------------------------------


def _smoothing_density(x, sk):
    return sk.eta / math.sqrt(2 * math.pi * sk.xi**2) * math.exp(-0.5 * x * x / sk.xi**2)


def quad_k_fu(t, w, lk, sk, epsabs=1e-10):
    """``k_fu`` by adaptive quadrature of ``int G(t - r) k_uu(r, w) dr``.

    The integration window is +-8 standard deviations of the widest factor,
    centred on the product's mode.
    """
    from scipy.integrate import quad

    t, w = float(t), float(w)
    lam2 = lk.lam**2
    if sk.xi == 0:
        return sk.eta * math.exp(-0.5 * (t - w) ** 2 / lam2)
    centre = (t * lam2 + w * sk.xi**2) / (lam2 + sk.xi**2)
    half = 8.0 * max(lk.lam, sk.xi)

    def integrand(r):
        return _smoothing_density(t - r, sk) * math.exp(-0.5 * (r - w) ** 2 / lam2)

    val, _ = quad(integrand, centre - half, centre + half, points=[centre],
                  epsabs=epsabs, epsrel=1e-9, limit=200)
    return val


_FF_INTEGRAND = None


def _ff_integrand():
    # compiled lazily: the oracle only runs under test
    global _FF_INTEGRAND
    if _FF_INTEGRAND is None:
        import numba
        from numba import types
        from scipy import LowLevelCallable

        sig = types.double(types.intc, types.CPointer(types.double))

        @numba.cfunc(sig)
        def integrand(n, xx):
            # xx = (s, r, t, t_prime, lam2, eta_a, xa2, eta_b, xb2)
            s, r = xx[0], xx[1]
            t, tp, lam2 = xx[2], xx[3], xx[4]
            ga = xx[5] / math.sqrt(2 * math.pi * xx[6]) * math.exp(-0.5 * (t - r) ** 2 / xx[6])
            gb = xx[7] / math.sqrt(2 * math.pi * xx[8]) * math.exp(-0.5 * (tp - s) ** 2 / xx[8])
            return ga * gb * math.exp(-0.5 * (r - s) ** 2 / lam2)

        _FF_INTEGRAND = LowLevelCallable(integrand.ctypes)
    return _FF_INTEGRAND


def quad_k_ff(t, t_prime, lk, sk_a, sk_b, epsabs=1e-10):
    """``k_ff`` by nested adaptive quadrature of the double convolution.

    The inner integral runs over the argument of ``G_b`` and the outer over
    the argument of ``G_a``; each window is +-8 standard deviations of the
    widest Gaussian around the integrand's mode.
    """
    from scipy.integrate import nquad

    t, t_prime = float(t), float(t_prime)
    if sk_a.xi == 0:
        return sk_a.eta * quad_k_fu(t_prime, t, lk, sk_b)
    if sk_b.xi == 0:
        return sk_b.eta * quad_k_fu(t, t_prime, lk, sk_a)
    lam2, xa2, xb2 = lk.lam**2, sk_a.xi**2, sk_b.xi**2
    half_in = 8.0 * max(lk.lam, sk_b.xi)
    half_out = 8.0 * max(lk.lam, sk_a.xi, sk_b.xi)
    args = (t, t_prime, lam2, sk_a.eta, xa2, sk_b.eta, xb2)

    def inner_centre(r):
        return (t_prime * lam2 + r * xb2) / (lam2 + xb2)

    def inner_range(r, *_):
        c = inner_centre(r)
        return (c - half_in, c + half_in)

    def inner_opts(r, *_):
        return {"points": [inner_centre(r)], "epsabs": epsabs, "epsrel": 1e-9, "limit": 200}

    centre = (t * (lam2 + xb2) + t_prime * xa2) / (lam2 + xa2 + xb2)
    outer_opts = {"points": [centre], "epsabs": epsabs, "epsrel": 1e-9, "limit": 200}
    val, _ = nquad(_ff_integrand(), [inner_range, (centre - half_out, centre + half_out)],
                   args=args, opts=[inner_opts, outer_opts])
    return val
