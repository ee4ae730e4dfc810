"""Task-allocation game: job dynamics, completion rates and the equilibrium solver.

Each task ``i`` holds ``q_i`` remaining jobs. Agents assigned to it complete
jobs at rate ``F_i(q_i, x_i) = R_i tanh(alpha_i q_i / 2) x_i**beta_i`` while
new jobs arrive at rate ``w_i``. Payoffs are the job levels themselves.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, NoEquilibrium

__all__ = [
    "GameParams",
    "Equilibrium",
    "RESOURCE_COLLECTION",
    "completion_rate",
    "completion_rates",
    "q_rhs",
    "solve_equilibrium",
    "TaskAllocationGame",
]

Q_MAX = 1e6


@dataclass(frozen=True)
class GameParams:
    """Per-task parameters of the resource-collection game.

    Attributes
    ----------
    R : tuple of float
        Saturation rates (jobs/time).
    alpha : tuple of float
        Job-level sensitivities (1/jobs).
    beta : tuple of float
        Diminishing-returns exponents in (0, 1).
    w : tuple of float
        Job arrival rates (jobs/time).
    """

    R: tuple
    alpha: tuple
    beta: tuple
    w: tuple

    def __post_init__(self):
        arrays = {}
        for name in ("R", "alpha", "beta", "w"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            arrays[name] = v
        n = max(v.size for v in arrays.values())
        for name, v in arrays.items():
            if v.size == 1:
                v = np.full(n, v[0])
            if v.size != n:
                raise ConfigError(f"{name} has length {v.size}, expected {n}")
            if not np.all(np.isfinite(v)):
                raise ConfigError(f"{name} has non-finite entries")
            object.__setattr__(self, name, tuple(float(e) for e in v))
        if n < 2:
            raise ConfigError("the game needs at least two tasks")
        if min(self.R) <= 0 or min(self.alpha) <= 0 or min(self.w) <= 0:
            raise ConfigError("R, alpha and w must be strictly positive")
        if not all(0 < b < 1 for b in self.beta):
            raise ConfigError("beta entries must lie in (0, 1)")

    @property
    def n(self):
        return len(self.w)

    def feasibility_margin(self):
        """``1 - sum_i (w_i / R_i)**(1 / beta_i)``; positive iff an interior equilibrium exists."""
        return 1.0 - sum((w / R) ** (1.0 / b) for w, R, b in zip(self.w, self.R, self.beta))

    def as_arrays(self):
        return tuple(np.asarray(getattr(self, k)) for k in ("R", "alpha", "beta", "w"))


RESOURCE_COLLECTION = GameParams(R=(3.44,) * 3, alpha=(0.036,) * 3, beta=(0.91,) * 3, w=(0.5, 1.0, 2.0))


@dataclass(frozen=True)
class Equilibrium:
    q_bar: float
    q_star: np.ndarray
    x_star: np.ndarray
    residual: float


def completion_rate(q_i, x_i, params, i):
    """Job completion rate of task ``i``; zero when the task or its workforce is empty."""
    if q_i < 0 or x_i < 0:
        raise ValueError(f"completion rate needs q_i >= 0 and x_i >= 0, got {q_i}, {x_i}")
    if q_i == 0 or x_i == 0:
        return 0.0
    return params.R[i] * math.tanh(0.5 * params.alpha[i] * q_i) * x_i ** params.beta[i]


def completion_rates(q, x, params):
    """Vectorised completion rates ``F(q, x)``; negative inputs are read as zero."""
    R, alpha, beta, _ = params.as_arrays()
    q = np.maximum(np.asarray(q, dtype=float), 0.0)
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    return R * np.tanh(0.5 * alpha * q) * x**beta


def q_rhs(q, x, params):
    """Job-level velocity ``w - F(q, x)``."""
    return np.asarray(params.w) - completion_rates(q, x, params)


def _allocation(q_bar, params):
    return [
        (w / (R * math.tanh(0.5 * a * q_bar))) ** (1.0 / b)
        for w, R, a, b in zip(params.w, params.R, params.alpha, params.beta)
    ]


def solve_equilibrium(params, q_max=Q_MAX, xtol=1e-13):
    """Interior equilibrium with ``theta = x*``.

    At a rest point of the closed loop with reference ``x*`` the choice map
    returns ``x*`` only if all job levels are equal, so the problem reduces to
    the scalar root of ``sum_i x_i(q) - 1`` with
    ``x_i(q) = (w_i / (R_i tanh(alpha_i q / 2)))**(1 / beta_i)``, found by
    bisection.

    Raises
    ------
    NoEquilibrium
        If the root function does not change sign on ``(0, q_max]``.
    """

    def h(q_bar):
        return math.fsum(_allocation(q_bar, params)) - 1.0

    lo = 1e-12
    if not (h(lo) > 0 > h(q_max)):
        raise NoEquilibrium(
            f"no sign change on (0, {q_max:g}]; feasibility margin is {params.feasibility_margin():.3g}"
        )
    q_bar = bisect(h, lo, q_max, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)
    x_star = np.array(_allocation(q_bar, params))
    x_star = x_star / x_star.sum()
    q_star = np.full(params.n, q_bar)
    residual = float(np.max(np.abs(completion_rates(q_star, x_star, params) - np.asarray(params.w))))
    return Equilibrium(q_bar=float(q_bar), q_star=q_star, x_star=x_star, residual=residual)


class TaskAllocationGame(BaseEstimator):
    """Resource-collection game as an estimator whose fit solves the equilibrium.

    Parameters
    ----------
    R, alpha, beta, w : array-like or float
        Per-task parameters; scalars broadcast across tasks.

    Attributes
    ----------
    x_star_ : ndarray of shape (n_tasks,)
        Equilibrium allocation, also the KLD-RL reference distribution.
    q_star_ : ndarray of shape (n_tasks,)
    q_bar_ : float
    residual_ : float
        Largest ``|F_i(q_bar, x*_i) - w_i|``.
    """

    def __init__(self, R=3.44, alpha=0.036, beta=0.91, w=(0.5, 1.0, 2.0)):
        self.R = R
        self.alpha = alpha
        self.beta = beta
        self.w = w

    @property
    def params(self):
        return GameParams(R=self.R, alpha=self.alpha, beta=self.beta, w=self.w)

    def fit(self, X=None, y=None):
        params = self.params
        eq = solve_equilibrium(params)
        self.params_ = params
        self.q_bar_ = eq.q_bar
        self.q_star_ = eq.q_star
        self.x_star_ = eq.x_star
        self.residual_ = eq.residual
        return self

    def predict(self, X):
        """Job velocity for stacked ``[q, x]`` rows of width ``2 n``."""
        check_is_fitted(self, "x_star_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = self.params_.n
        return q_rhs(X[:, :n], X[:, n:], self.params_)
