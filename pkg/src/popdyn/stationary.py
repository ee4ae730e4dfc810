"""Exact and Monte Carlo analysis of the large-eta (open-loop) jump chain.

When the choice map is pinned to ``x*`` a reviser playing ``i`` moves to
``j`` with probability ``x*_j``. The embedded chain on the N-agent simplex
grid has stationary mean ``x*`` and summed variance ``(1 - x*'x*) / N``.
"""

import itertools
import json
from dataclasses import asdict, dataclass
from math import comb

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .core import make_rng
from .exceptions import NotConverged, StateSpaceTooLarge
from .utils.validation import check_simplex

__all__ = [
    "StateSpace",
    "StationaryReport",
    "enumerate_states",
    "build_chain",
    "stationary_distribution",
    "stationary_moments",
    "closed_form_moments",
    "monte_carlo_moments",
    "batch_means",
    "moment_estimates",
    "StationaryChain",
]

MAX_STATES = 10**6
DENSE_LIMIT = 10**4
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StateSpace:
    N: int
    n: int
    states: np.ndarray  # (n_states, n) integer counts, lexicographic
    index: dict

    def __len__(self):
        return self.states.shape[0]

    @property
    def points(self):
        return self.states / self.N


def _compositions(N, n):
    # reverse-lexicographic order of counts, i.e. (N, 0, ..., 0) first
    if n == 1:
        yield (N,)
        return
    for first in range(N, -1, -1):
        for rest in _compositions(N - first, n - 1):
            yield (first,) + rest


def enumerate_states(N, n):
    """All count vectors of N agents over n strategies, sorted lexicographically."""
    if N < 1 or n < 2:
        raise ValueError("need N >= 1 and n >= 2")
    size = comb(N + n - 1, n - 1)
    if size > MAX_STATES:
        raise StateSpaceTooLarge(f"{size} states exceed the limit {MAX_STATES}")
    states = np.array(sorted(_compositions(N, n)), dtype=np.int64)
    index = {tuple(s): k for k, s in enumerate(states.tolist())}
    return StateSpace(N=N, n=n, states=states, index=index)


def build_chain(xstar, space):
    """Sparse row-stochastic matrix of the jump chain with choice pinned to ``xstar``."""
    xstar = check_simplex(xstar, space.n, atol=1e-9, name="xstar")
    N, n = space.N, space.n
    rows, cols, vals = [], [], []
    for k, counts in enumerate(space.states):
        x = counts / N
        rows.append(k)
        cols.append(k)
        vals.append(float(x @ xstar))
        for i, j in itertools.permutations(range(n), 2):
            mass = x[i] * xstar[j]
            if mass == 0.0:
                continue
            y = counts.copy()
            y[i] -= 1
            y[j] += 1
            rows.append(k)
            cols.append(space.index[tuple(y.tolist())])
            vals.append(mass)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(space), len(space)))


def _dense_stationary(P):
    P = P.toarray() if sp.issparse(P) else np.asarray(P)
    m = P.shape[0]
    A = P.T - np.eye(m)
    A[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    return scipy.linalg.solve(A, b)


def _power_stationary(P, tol=1e-13, max_iter=1_000_000, start=None):
    P = sp.csr_matrix(P)
    PT = P.T.tocsr()
    m = P.shape[0]
    mu = np.full(m, 1.0 / m) if start is None else np.asarray(start, float) / np.sum(start)
    for _ in range(max_iter):
        nxt = PT @ mu
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - mu)) < tol:
            return nxt
        mu = nxt
    raise NotConverged(f"power iteration did not reach {tol:g} in {max_iter} steps")


def stationary_distribution(P, method="auto", start=None):
    """Solve ``mu' P = mu'`` with ``sum(mu) = 1``.

    ``method`` is ``"dense"`` (direct solve), ``"power"`` or ``"auto"``
    (dense up to 10**4 states).

    Raises
    ------
    NotConverged
        If the residual ``||mu'P - mu'||_inf`` stays above 1e-10.
    """
    m = P.shape[0]
    if method == "auto":
        method = "dense" if m <= DENSE_LIMIT else "power"
    if method == "dense":
        mu = _dense_stationary(P)
    elif method == "power":
        mu = _power_stationary(P, start=start)
    else:
        raise ValueError(f"unknown method {method!r}")
    mu = np.where(np.abs(mu) < 1e-300, 0.0, mu)
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    residual = float(np.max(np.abs(P.T @ mu - mu)))
    if residual >= 1e-10:
        raise NotConverged(f"stationary residual {residual:.3g}")
    return mu


def stationary_moments(mu, space):
    """Stationary mean and summed variance ``sum_i Var(X_i)``."""
    X = space.points
    mean = mu @ X
    sum_var = float(mu @ np.sum((X - mean) ** 2, axis=1))
    return mean, sum_var


def closed_form_moments(xstar, N):
    xstar = np.asarray(xstar, dtype=float)
    return xstar.copy(), float((1.0 - xstar @ xstar) / N)


@dataclass
class StationaryReport:
    N: int
    n: int
    xstar: list
    mean: list
    sum_var: float
    closed_form_sum_var: float
    residual: float
    n_states: int
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def batch_means(values, n_batches=50):
    """Mean and batch-means standard error along the first axis."""
    values = np.asarray(values, dtype=float)
    m = values.shape[0] // n_batches
    if m < 1:
        raise ValueError("too few samples for the requested number of batches")
    trimmed = values[: m * n_batches]
    batches = trimmed.reshape((n_batches, m) + values.shape[1:]).mean(axis=1)
    return values.mean(axis=0), batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def moment_estimates(states, n_batches=50):
    """Empirical mean and summed variance of sampled states with batch-means errors.

    The variance is estimated around the sample mean; its standard error comes
    from batching the squared deviations.
    """
    states = np.asarray(states, dtype=float)
    mean, mean_se = batch_means(states, n_batches)
    sq = np.sum((states - mean) ** 2, axis=1)
    sum_var, var_se = batch_means(sq, n_batches)
    return {"mean": mean, "mean_se": mean_se, "sum_var": float(sum_var), "sum_var_se": float(var_se)}


def monte_carlo_moments(xstar, N, T_burn, T_sample, rng=None, n_batches=50, x0_counts=None):
    """Simulate the pinned jump chain and estimate its stationary moments.

    Each step picks a uniform agent and redraws its strategy from ``xstar``.
    The first ``T_burn`` steps are discarded; the states after each of the
    next ``T_sample`` steps are used.
    """
    xstar = check_simplex(xstar, atol=1e-9, name="xstar")
    n = xstar.size
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    if x0_counts is None:
        strategies = rng.choice(n, size=N, p=xstar)
    else:
        strategies = np.repeat(np.arange(n), x0_counts)
    counts = np.bincount(strategies, minlength=n)
    total = T_burn + T_sample
    agents = rng.integers(N, size=total)
    new = np.searchsorted(np.cumsum(xstar), rng.random(total) * xstar.sum(), side="right")
    new = np.minimum(new, n - 1)
    out = np.empty((T_sample, n), dtype=np.int64)
    strategies = strategies.tolist()
    counts = counts.tolist()
    for k in range(total):
        a = agents[k]
        old = strategies[a]
        s = int(new[k])
        if s != old:
            strategies[a] = s
            counts[old] -= 1
            counts[s] += 1
        if k >= T_burn:
            out[k - T_burn] = counts
    est = moment_estimates(out / N, n_batches)
    return est["mean"], est["sum_var"], {"mean": est["mean_se"], "sum_var": est["sum_var_se"]}


class StationaryChain(BaseEstimator):
    """Exact stationary analysis of the pinned jump chain.

    Parameters
    ----------
    N : int, default=10
    method : {"auto", "dense", "power"}, default="auto"

    Attributes
    ----------
    space_ : StateSpace
    P_ : scipy.sparse.csr_matrix
    mu_ : ndarray of shape (n_states,)
    mean_ : ndarray of shape (n,)
    sum_var_ : float
    residual_ : float
    """

    def __init__(self, N=10, method="auto"):
        self.N = N
        self.method = method

    def fit(self, xstar, y=None):
        xstar = check_simplex(xstar, atol=1e-9, name="xstar")
        self.xstar_ = xstar
        self.space_ = enumerate_states(self.N, xstar.size)
        self.P_ = build_chain(xstar, self.space_)
        self.mu_ = stationary_distribution(self.P_, self.method)
        self.mean_, self.sum_var_ = stationary_moments(self.mu_, self.space_)
        self.residual_ = float(np.max(np.abs(self.P_.T @ self.mu_ - self.mu_)))
        return self

    def report(self):
        return StationaryReport(
            N=int(self.N),
            n=int(self.xstar_.size),
            xstar=self.xstar_.tolist(),
            mean=self.mean_.tolist(),
            sum_var=float(self.sum_var_),
            closed_form_sum_var=closed_form_moments(self.xstar_, self.N)[1],
            residual=self.residual_,
            n_states=len(self.space_),
        )

    def mu_to_csv(self):
        n = self.xstar_.size
        lines = [",".join([f"c{i + 1}" for i in range(n)] + ["mu"])]
        for counts, m in zip(self.space_.states, self.mu_):
            lines.append(",".join([str(int(c)) for c in counts] + [repr(float(m))]))
        return "\n".join(lines) + "\n"
