"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

__all__ = [
    "check_simplex",
    "check_strictly_positive",
    "check_counts",
    "check_payoff",
    "check_scalar_positive",
]


def check_payoff(p, n=None, name="p"):
    """Return ``p`` as a finite 1-d float array, optionally of length ``n``."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-d vector, got shape {p.shape}")
    if n is not None and p.size != n:
        raise ValueError(f"{name} must have length {n}, got {p.size}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has non-finite entries")
    return p


def check_simplex(x, n=None, atol=1e-12, name="x"):
    """Return ``x`` as a float array after checking it lies on the simplex."""
    x = check_payoff(x, n, name)
    if np.any(x < -atol) or np.any(x > 1 + atol):
        raise ValueError(f"{name} has entries outside [0, 1]: {x}")
    if abs(x.sum() - 1.0) > max(atol, x.size * 1e-15):
        raise ValueError(f"{name} does not sum to 1 (sum={x.sum()!r})")
    return x


def check_strictly_positive(v, name="theta"):
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0)):
        raise ValueError(f"{name} must be strictly positive, got {v}")
    return v


def check_counts(counts, N=None):
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a nonempty 1-d vector")
    if not np.issubdtype(counts.dtype, np.integer):
        if not np.all(np.equal(np.mod(counts, 1), 0)):
            raise ValueError(f"counts must be integers, got {counts}")
        counts = counts.astype(np.int64)
    if np.any(counts < 0):
        raise ValueError(f"counts must be nonnegative, got {counts}")
    total = int(counts.sum())
    if total <= 0:
        raise ValueError("population size must be positive")
    if N is not None and total != N:
        raise ValueError(f"counts sum to {total}, expected N={N}")
    return counts


def check_scalar_positive(value, name, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return float(value)
