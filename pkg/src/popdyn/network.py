"""Communication graphs and consensus-based payoff estimation.

Agents that are not observers average the previous estimates of their
in-neighbours once per time unit. Observers copy the true payoff. Each agent
keeps a short history so that revisions can use an estimate that is ``d``
time units old.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .core import make_rng
from .exceptions import GraphSamplingExhausted

__all__ = [
    "CommGraph",
    "EstimateBank",
    "sample_er_digraph",
    "is_strongly_connected",
    "choose_observers",
    "consensus_step",
    "delayed_estimate",
]

MAX_GRAPH_DRAWS = 100_000


@dataclass(frozen=True)
class CommGraph:
    """Directed graph; ``adjacency[k, l]`` is True for an edge ``k -> l``.

    Agent ``l`` averages over its in-neighbours ``{k : adjacency[k, l]}``.
    """

    adjacency: np.ndarray
    draws: int = 1

    @property
    def n_agents(self):
        return self.adjacency.shape[0]

    @property
    def in_neighbors(self):
        return [np.flatnonzero(self.adjacency[:, l]) for l in range(self.n_agents)]

    def weight_matrix(self, include_self=False):
        """Row-stochastic averaging matrix ``W[l, k] = 1 / |N_l|`` for in-neighbours ``k``."""
        A = self.adjacency.T.astype(float)
        if include_self:
            A = A + np.eye(self.n_agents)
        deg = A.sum(axis=1, keepdims=True)
        if np.any(deg == 0):
            raise ValueError("an agent has no in-neighbours")
        return A / deg

    def to_edgelist(self):
        """Edge list text, one ``src dst`` pair per line (0-based agents)."""
        src, dst = np.nonzero(self.adjacency)
        return "".join(f"{s} {d}\n" for s, d in zip(src, dst))

    @classmethod
    def from_edgelist(cls, text, n_agents):
        A = np.zeros((n_agents, n_agents), dtype=bool)
        for line in text.splitlines():
            if line.strip():
                s, d = map(int, line.split())
                A[s, d] = True
        return cls(A)

    @classmethod
    def complete(cls, n_agents):
        return cls(~np.eye(n_agents, dtype=bool))


def is_strongly_connected(adjacency):
    n_comp, _ = connected_components(csr_matrix(adjacency), directed=True, connection="strong")
    return n_comp == 1


def sample_er_digraph(n_agents, prob, rng=None, max_draws=MAX_GRAPH_DRAWS):
    """Erdos-Renyi digraph conditioned on strong connectivity.

    Every ordered pair ``(k, l)`` with ``k != l`` is an edge independently with
    probability ``prob``; the whole graph is resampled until it is strongly
    connected.
    """
    if n_agents < 2:
        raise ValueError("need at least two agents")
    if not 0 < prob <= 1:
        raise ValueError(f"prob must lie in (0, 1], got {prob}")
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    off_diag = ~np.eye(n_agents, dtype=bool)
    for draw in range(1, max_draws + 1):
        A = (rng.random((n_agents, n_agents)) < prob) & off_diag
        # a node without in- or out-edges rules out strong connectivity cheaply
        if not (A.any(axis=0).all() and A.any(axis=1).all()):
            continue
        if is_strongly_connected(A):
            return CommGraph(A, draws=draw)
    raise GraphSamplingExhausted(
        f"no strongly connected graph after {max_draws} draws (n={n_agents}, prob={prob})"
    )


def choose_observers(n_agents, rng, fraction=0.1):
    """Pick ``max(1, round(fraction * n_agents))`` observers uniformly without replacement."""
    k = max(1, int(round(fraction * n_agents)))
    return np.sort(rng.choice(n_agents, size=k, replace=False))


class EstimateBank:
    """Per-agent payoff estimates with a ring buffer of past integer-time values.

    Parameters
    ----------
    n_agents, n_strategies : int
    observers : array-like of int
        Agents that read the true payoff at each update.
    delay : int
        Largest lag that :meth:`delayed` must serve.
    initial : array-like of shape (n_strategies,), optional
        Estimate held before the first update, zeros by default.
    """

    def __init__(self, n_agents, n_strategies, observers, delay=0, initial=None):
        if delay < 0 or int(delay) != delay:
            raise ValueError(f"delay must be a nonnegative integer, got {delay}")
        self.observers = np.asarray(observers, dtype=np.intp)
        self.delay = int(delay)
        self.initial = np.zeros(n_strategies) if initial is None else np.asarray(initial, float)
        self.estimates = np.tile(self.initial, (n_agents, 1))
        self.history = np.empty((self.delay + 1, n_agents, n_strategies))
        self.last_time = -1

    @property
    def n_agents(self):
        return self.estimates.shape[0]

    def copy(self):
        new = EstimateBank.__new__(EstimateBank)
        new.observers = self.observers.copy()
        new.delay = self.delay
        new.initial = self.initial.copy()
        new.estimates = self.estimates.copy()
        new.history = self.history.copy()
        new.last_time = self.last_time
        return new

    def update(self, weights, p_true):
        """Synchronous (Jacobi) consensus update; advances the integer clock by one."""
        new = weights @ self.estimates
        new[self.observers] = p_true
        self.estimates = new
        self.last_time += 1
        self.history[self.last_time % (self.delay + 1)] = new
        return self

    def delayed(self, k, now, d=None):
        """Agent ``k``'s estimate stored at integer time ``now - d``.

        Lags reaching before the first update return the initial estimate.
        """
        d = self.delay if d is None else d
        lag_time = now - d
        if lag_time < 0:
            return self.initial.copy()
        if lag_time > self.last_time or self.last_time - lag_time > self.delay:
            raise ValueError(
                f"time {lag_time} outside the stored window "
                f"[{self.last_time - self.delay}, {self.last_time}]"
            )
        return self.history[lag_time % (self.delay + 1), k].copy()

    def delayed_all(self, now, d=None):
        """Delayed estimates of every agent, shape ``(n_agents, n_strategies)``."""
        d = self.delay if d is None else d
        lag_time = now - d
        if lag_time < 0:
            return np.tile(self.initial, (self.n_agents, 1))
        return self.history[lag_time % (self.delay + 1)].copy()


def consensus_step(bank, graph, p_true, include_self=False):
    """Functional form of :meth:`EstimateBank.update`; returns a new bank."""
    return bank.copy().update(graph.weight_matrix(include_self), np.asarray(p_true, float))


def delayed_estimate(bank, k, now, d):
    return bank.delayed(k, now, d)
