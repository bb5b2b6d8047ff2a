"""Input validation helpers shared by the estimators and functional API."""

import numpy as np

from .exceptions import ContractError


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ContractError(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_nonnegative(value, name):
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ContractError(f"{name} must be non-negative and finite, got {value!r}")
    return value


def check_vector(x, name, length=None, allow_empty=True):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ContractError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not allow_empty and arr.size == 0:
        raise ContractError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_series(times, values, name="series"):
    """Validate one unit's (times, values) observation pair.

    Returns float arrays; times must be sorted non-decreasing.
    """
    t = check_vector(times, f"{name}.times")
    y = check_vector(values, f"{name}.values", length=t.shape[0])
    if t.size > 1 and np.any(np.diff(t) < 0):
        raise ContractError(f"{name}.times must be sorted")
    return t, y


def check_probabilities(p, name="probs", atol=1e-9):
    p = check_vector(p, name, allow_empty=False)
    if np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ContractError(f"{name} must be non-negative and sum to 1, got {p!r}")
    return p


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for ``seed``.

    Accepts None, an int, a SeedSequence or an existing Generator.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
