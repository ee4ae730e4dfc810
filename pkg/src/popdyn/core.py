"""Simplex arithmetic, divergences, norms and the seeded generator contract."""

from dataclasses import dataclass

import numpy as np

from .utils.validation import check_counts, check_simplex, check_strictly_positive

__all__ = [
    "RngSpec",
    "make_rng",
    "kl_divergence",
    "state_from_counts",
    "counts_from_state",
    "max_norm",
    "SIMPLEX_ATOL",
]

SIMPLEX_ATOL = 1e-12

RNG_ALGORITHM = "PCG64"


@dataclass(frozen=True)
class RngSpec:
    """Seed contract for all random draws.

    The generator is numpy's PCG64 (a 128-bit-state permuted congruential
    generator with documented, platform-independent output). Replicas are
    separated through ``stream``, which enters the seed sequence as a spawn
    key, so different streams never share state.
    """

    seed: int = 0
    stream: int = 0
    algorithm: str = RNG_ALGORITHM

    def __post_init__(self):
        if self.algorithm != RNG_ALGORITHM:
            raise ValueError(f"unsupported generator {self.algorithm!r}; only {RNG_ALGORITHM}")
        for name in ("seed", "stream"):
            value = getattr(self, name)
            if not (0 <= int(value) < 2**64):
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")


def make_rng(spec=None):
    """Build a ``numpy.random.Generator`` from an :class:`RngSpec` or an int seed."""
    if spec is None:
        spec = RngSpec()
    elif isinstance(spec, (int, np.integer)):
        spec = RngSpec(seed=int(spec))
    seq = np.random.SeedSequence(entropy=int(spec.seed), spawn_key=(int(spec.stream),))
    return np.random.Generator(np.random.PCG64(seq))


def kl_divergence(x, theta):
    """Kullback-Leibler divergence ``sum_i x_i log(x_i / theta_i)``.

    Terms with ``x_i = 0`` contribute zero.

    Parameters
    ----------
    x : array-like of shape (n,)
        Point of the simplex.
    theta : array-like of shape (n,)
        Strictly positive reference distribution.

    Returns
    -------
    float
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.shape != theta.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {theta.shape}")
    check_strictly_positive(theta, "theta")
    mask = x > 0
    value = float(np.sum(x[mask] * np.log(x[mask] / theta[mask])))
    # rounding can leave tiny negatives at x == theta
    return max(value, 0.0)


def state_from_counts(counts, N=None):
    """Map agent counts per strategy to the population state ``counts / N``."""
    counts = check_counts(counts, N)
    return counts / counts.sum()


def counts_from_state(x, N):
    """Inverse of :func:`state_from_counts` for grid points of the N-agent simplex."""
    x = check_simplex(x)
    scaled = x * N
    counts = np.rint(scaled).astype(np.int64)
    if not np.allclose(scaled, counts, atol=1e-9) or counts.sum() != N:
        raise ValueError(f"{x} is not a grid point for N={N}")
    return counts


def max_norm(v):
    """Maximum absolute entry of a nonempty vector."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("max_norm of an empty vector")
    return float(np.max(np.abs(v)))
