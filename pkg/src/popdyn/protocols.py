"""Revision protocols and the log-sum-exp calculus of the KLD-RL choice map.

Two protocols are supported. The Smith protocol switches from strategy ``j``
to ``i`` with probability proportional to the positive payoff gap; the
KLD-RL protocol samples the next strategy from a reference-weighted softmax

    C_i(p) = theta_i exp(p_i / eta) / sum_l theta_l exp(p_l / eta),

which maximises ``z'p - eta KL(z || theta)`` over the simplex.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import kl_divergence
from .utils.validation import (
    check_payoff,
    check_scalar_positive,
    check_simplex,
    check_strictly_positive,
)

__all__ = [
    "Smith",
    "KLDRL",
    "smith_row",
    "smith_matrix",
    "lse",
    "kld_rl_choice",
    "kld_rl_argmax_check",
    "lse_gradient",
    "lse_hessian",
    "lipschitz_gap",
    "revision_matrix",
    "edm_velocity",
    "smith_varrho",
    "KLDRLChoice",
]

ROW_TOL = 1e-12


@dataclass(frozen=True)
class Smith:
    """Smith pairwise-comparison protocol with switching scale ``varrho``."""

    varrho: float

    def __post_init__(self):
        check_scalar_positive(self.varrho, "varrho")

    name = "smith"


@dataclass(frozen=True)
class KLDRL:
    """KL-divergence regularized learning with temperature ``eta`` and reference ``theta``."""

    eta: float
    theta: tuple = field()

    def __post_init__(self):
        check_scalar_positive(self.eta, "eta")
        theta = check_simplex(self.theta, name="theta", atol=1e-9)
        check_strictly_positive(theta, "theta")
        # normalise once so downstream sums are exact to rounding
        object.__setattr__(self, "theta", tuple(float(t) for t in theta / theta.sum()))

    name = "kldrl"

    @property
    def theta_array(self):
        return np.asarray(self.theta)


def smith_varrho(n, M_q):
    """Largest Smith scale keeping every row a distribution for payoffs in [0, M_q]."""
    return 1.0 / ((n - 1) * M_q)


def smith_row(p, j, varrho):
    """Switch distribution of a Smith reviser currently playing strategy ``j`` (0-based).

    Raises
    ------
    ValueError
        If the off-diagonal mass exceeds one, i.e. ``varrho`` is too large
        for the observed payoff gaps.
    """
    p = check_payoff(p)
    if not 0 <= j < p.size:
        raise IndexError(f"strategy index {j} out of range for n={p.size}")
    row = varrho * np.maximum(p - p[j], 0.0)
    row[j] = 0.0
    off = row.sum()
    if off > 1.0 + ROW_TOL:
        raise ValueError(
            f"Smith row for strategy {j} has off-diagonal mass {off:.6g} > 1; "
            "varrho is too large for these payoffs"
        )
    row[j] = 1.0 - off
    return row


def smith_matrix(p, varrho):
    """Full Smith revision matrix, row ``j`` being :func:`smith_row` ``(p, j)``."""
    p = check_payoff(p)
    gaps = varrho * np.maximum(p[None, :] - p[:, None], 0.0)
    np.fill_diagonal(gaps, 0.0)
    off = gaps.sum(axis=1)
    if np.any(off > 1.0 + ROW_TOL):
        raise ValueError(f"Smith rows have off-diagonal mass {off.max():.6g} > 1")
    gaps[np.diag_indices_from(gaps)] = 1.0 - off
    return gaps


def _shifted_weights(p, eta, theta):
    z = (p - p.max()) / eta
    return theta * np.exp(z)


def lse(p, eta, theta):
    """``eta * log(sum_j theta_j exp(p_j / eta))`` evaluated with max subtraction."""
    p = check_payoff(p)
    theta = check_strictly_positive(np.asarray(theta, dtype=float))
    pmax = p.max()
    return float(pmax + eta * np.log(np.sum(theta * np.exp((p - pmax) / eta))))


def kld_rl_choice(p, eta, theta):
    """KLD-RL choice map; strictly positive output on the simplex."""
    p = check_payoff(p)
    theta = check_strictly_positive(np.asarray(theta, dtype=float))
    weights = _shifted_weights(p, eta, theta)
    return weights / weights.sum()


def kld_rl_argmax_check(p, eta, theta, z, tol=1e-9):
    """True when ``z`` does not beat the choice map on ``z'p - eta KL(z || theta)``."""
    p = check_payoff(p)
    c = kld_rl_choice(p, eta, theta)
    best = c @ p - eta * kl_divergence(c, theta)
    value = np.asarray(z, dtype=float) @ p - eta * kl_divergence(z, theta)
    return bool(value <= best + tol)


def lse_gradient(p, eta, theta):
    return kld_rl_choice(p, eta, theta)


def lse_hessian(p, eta, theta):
    c = kld_rl_choice(p, eta, theta)
    return (np.diag(c) - np.outer(c, c)) / eta


def lipschitz_gap(p, phat, eta, theta):
    """Both sides of the choice-map Lipschitz bound.

    Returns
    -------
    lhs : float
        ``||C(p) - C(phat)||_2``.
    rhs : float
        ``||p - phat||_2 / eta``.
    """
    p = check_payoff(p)
    phat = check_payoff(phat, p.size, "phat")
    lhs = float(np.linalg.norm(kld_rl_choice(p, eta, theta) - kld_rl_choice(phat, eta, theta)))
    rhs = float(np.linalg.norm(p - phat) / eta)
    return lhs, rhs


def revision_matrix(p, spec):
    """Row-stochastic matrix ``rho[j, i]`` of switching from ``j`` to ``i``."""
    if isinstance(spec, KLDRL):
        c = kld_rl_choice(p, spec.eta, spec.theta_array)
        return np.tile(c, (c.size, 1))
    if isinstance(spec, Smith):
        return smith_matrix(p, spec.varrho)
    raise TypeError(f"unknown protocol {spec!r}")


def edm_velocity(p, x, spec):
    """Unit-rate mean dynamic ``sum_j x_j rho_ji - x_i sum_j rho_ij``.

    Multiply by the revision rate to get the evolutionary dynamics model.
    For KLD-RL this is exactly ``C(p) - x``.
    """
    p = check_payoff(p)
    x = check_simplex(x, p.size, atol=1e-9)
    if isinstance(spec, KLDRL):
        return kld_rl_choice(p, spec.eta, spec.theta_array) - x
    rho = revision_matrix(p, spec)
    inflow = x @ rho
    outflow = x * rho.sum(axis=1)
    return inflow - outflow


class KLDRLChoice(TransformerMixin, BaseEstimator):
    """Transformer mapping payoff vectors to KLD-RL choice distributions.

    Parameters
    ----------
    eta : float, default=1.0
        Regularisation temperature. Large values pin the output to ``theta``.
    theta : array-like of shape (n_strategies,), default=None
        Strictly positive reference distribution. ``None`` means uniform over
        the strategies seen in :meth:`fit`.

    Attributes
    ----------
    theta_ : ndarray of shape (n_strategies,)
    n_features_in_ : int
    """

    def __init__(self, eta=1.0, theta=None):
        self.eta = eta
        self.theta = theta

    def fit(self, P, y=None):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        n = P.shape[1]
        check_scalar_positive(self.eta, "eta")
        if self.theta is None:
            theta = np.full(n, 1.0 / n)
        else:
            theta = check_simplex(self.theta, n, atol=1e-9, name="theta")
            check_strictly_positive(theta, "theta")
        self.theta_ = theta
        self.n_features_in_ = n
        return self

    def transform(self, P):
        """Choice distribution for each payoff row of ``P``."""
        check_is_fitted(self, "theta_")
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if P.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} strategies, got {P.shape[1]}")
        Z = (P - P.max(axis=1, keepdims=True)) / self.eta
        W = self.theta_ * np.exp(Z)
        return W / W.sum(axis=1, keepdims=True)

    def score_samples(self, P):
        """Log-sum-exp value of each payoff row (the convex potential of the map)."""
        check_is_fitted(self, "theta_")
        P = np.atleast_2d(np.asarray(P, dtype=float))
        pmax = P.max(axis=1)
        return pmax + self.eta * np.log(
            np.sum(self.theta_ * np.exp((P - pmax[:, None]) / self.eta), axis=1)
        )
