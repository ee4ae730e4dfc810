"""Storage and antistorage functions and the noise-sensitivity bound checker.

The storage function of the KLD-RL dynamic is

    S(p, x) = lse(p) - p'x + eta KL(x || theta),

which is nonnegative, vanishes exactly on ``x = C(p)`` and has
``grad_p S = C(p) - x``. The antistorage candidate for the resource game,

    L(q, x) = sum_i R_i tanh(alpha_i q_i / 2) x_i**(beta_i + 1) / (beta_i + 1) - w'x + offset,

satisfies ``grad_x L = F - w`` by construction; its q-gradient condition is
not guaranteed and is reported as a premise check.

The bound compared along a trajectory is

    int ||C(p) - Xhat||^2 dt  <=  (alpha + int |g| dt) / (lam^2 eta).
"""

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import trapezoid

from .core import kl_divergence
from .exceptions import InsufficientResolution
from .game import GameParams
from .protocols import lse

__all__ = [
    "StorageSpec",
    "AntistorageSpec",
    "BoundInputs",
    "BoundReport",
    "storage_S",
    "antistorage_L",
    "g_lambda",
    "g_bound_constants",
    "g_lambda_bound",
    "check_premises",
    "check_dissipation_bound",
    "bound_inputs_from_meanfield",
    "bound_inputs_from_finite",
    "passivity_integral_check",
]

SCHEMA_VERSION = 1
PREMISE_TOL = 1e-9
RESOLUTION_LIMIT = 0.01


@dataclass(frozen=True)
class StorageSpec:
    eta: float
    theta: tuple
    interior_clamp: float = 1e-9

    @property
    def theta_array(self):
        return np.asarray(self.theta, dtype=float)


@dataclass(frozen=True)
class AntistorageSpec:
    game: GameParams
    offset: float = None

    @property
    def offset_value(self):
        return float(sum(self.game.w)) if self.offset is None else float(self.offset)


def _clamp(X, eps):
    X = np.asarray(X, dtype=float)
    n = X.shape[-1]
    return (1.0 - eps) * X + eps / n


def _choice_batch(P, eta, theta):
    P = np.atleast_2d(P)
    Z = (P - P.max(axis=1, keepdims=True)) / eta
    W = theta * np.exp(Z)
    return W / W.sum(axis=1, keepdims=True)


def _grad_x_S(P, X, spec):
    Xc = _clamp(X, spec.interior_clamp)
    return -np.atleast_2d(P) + spec.eta * (np.log(Xc) - np.log(spec.theta_array) + 1.0)


def _F(Q, X, game):
    R, alpha, beta, _ = game.as_arrays()
    return R * np.tanh(0.5 * alpha * np.maximum(Q, 0.0)) * np.maximum(X, 0.0) ** beta


def _L(Q, X, spec):
    R, alpha, beta, w = spec.game.as_arrays()
    Q, X = np.atleast_2d(Q), np.atleast_2d(X)
    body = R * np.tanh(0.5 * alpha * Q) * np.maximum(X, 0.0) ** (beta + 1) / (beta + 1) - w * X
    return body.sum(axis=1) + spec.offset_value


def _grad_q_L(Q, X, spec):
    R, alpha, beta, _ = spec.game.as_arrays()
    sech2 = 1.0 / np.cosh(0.5 * alpha * np.atleast_2d(Q)) ** 2
    return R * 0.5 * alpha * sech2 * np.maximum(np.atleast_2d(X), 0.0) ** (beta + 1) / (beta + 1)


def storage_S(p, x, spec, return_gradients=False):
    """Storage value ``lse(p) - p'x + eta KL(x || theta)``.

    The value uses the exact divergence; gradients use ``x`` pulled to the
    interior by ``(1 - c) x + c / n`` with ``c = spec.interior_clamp``.

    Returns
    -------
    float, or (float, ndarray, ndarray) with ``grad_p`` and ``grad_x``
    """
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    theta = spec.theta_array
    value = lse(p, spec.eta, theta) - p @ x + spec.eta * kl_divergence(x, theta)
    if not return_gradients:
        return float(value)
    grad_p = _choice_batch(p, spec.eta, theta)[0] - x
    grad_x = _grad_x_S(p, x, spec)[0]
    return float(value), grad_p, grad_x


def antistorage_L(q, x, spec, return_gradients=False):
    """Antistorage candidate value; optionally with ``grad_q`` and ``grad_x``."""
    q = np.asarray(q, dtype=float)
    x = np.asarray(x, dtype=float)
    value = float(_L(q, x, spec)[0])
    if not return_gradients:
        return value
    grad_q = _grad_q_L(q, x, spec)[0]
    grad_x = _F(q, x, spec.game) - np.asarray(spec.game.w)
    return value, grad_q, grad_x


def _g_batch(Q, X, EV, WT, lam, storage, anti):
    P = Q
    V = _choice_batch(P, storage.eta, storage.theta_array) - X
    gxS = _grad_x_S(P, X, storage)
    F = _F(Q, X, anti.game)
    w = np.asarray(anti.game.w)
    gqL = _grad_q_L(Q, X, anti)
    return (
        -2.0 * lam * np.sum(EV * WT, axis=1)
        + lam * np.sum((lam * gxS + F - w) * EV, axis=1)
        + np.sum((gqL - lam * V) * WT, axis=1)
    )


def g_lambda(p, x_hat, w_tilde, eps, v, lam, storage, antistorage, q=None):
    """Noise coupling term of the bound at one instant.

    ``-2 lam (eps + v)'w + lam (lam grad_x S + F - w_rate)'(eps + v) + (grad_q L - lam V)'w``
    with ``V = C(p) - x_hat``; ``q`` defaults to ``p``.
    """
    q = p if q is None else q
    EV = np.atleast_2d(np.asarray(eps, float) + np.asarray(v, float))
    WT = np.atleast_2d(np.asarray(w_tilde, float))
    Q = np.atleast_2d(np.asarray(q, float))
    X = np.atleast_2d(np.asarray(x_hat, float))
    if not np.array_equal(np.asarray(p, float), np.asarray(q, float)):
        raise ValueError("payoffs equal job levels in this game; p and q must coincide")
    return float(_g_batch(Q, X, EV, WT, lam, storage, antistorage)[0])


def g_bound_constants(Q, X, storage, antistorage):
    """Sampled sup-norms ``M_gradS, M_F, M_gradL, M_V`` over the rows of ``(Q, X)``."""
    Q, X = np.atleast_2d(Q), np.atleast_2d(X)
    norm = lambda A: float(np.max(np.linalg.norm(A, axis=1)))  # noqa: E731
    return {
        "M_grad_S": norm(_grad_x_S(Q, X, storage)),
        "M_F": norm(_F(Q, X, antistorage.game)),
        "M_grad_L": norm(_grad_q_L(Q, X, antistorage)),
        "M_V": norm(_choice_batch(Q, storage.eta, storage.theta_array) - X),
    }


def g_lambda_bound(eps_v, w_tilde, lam, constants, w):
    """Cauchy-Schwarz upper bound on ``|g|`` given the sampled constants."""
    a = float(np.linalg.norm(eps_v))
    b = float(np.linalg.norm(w_tilde))
    c = constants
    return (
        2 * lam * a * b
        + lam * (lam * c["M_grad_S"] + c["M_F"] + float(np.linalg.norm(w))) * a
        + (c["M_grad_L"] + lam * c["M_V"]) * b
    )


def check_premises(P, X, Q, storage, antistorage):
    """Worst violations of the two algebraic premises over sample rows.

    ``worst_storage = max (grad_x S'V + eta V'V)`` and
    ``worst_antistorage = max grad_q L'(w - F)``; values ``<= 0`` mean satisfied.
    """
    P, X, Q = np.atleast_2d(P), np.atleast_2d(X), np.atleast_2d(Q)
    if P.size == 0:
        raise ValueError("no samples")
    V = _choice_batch(P, storage.eta, storage.theta_array) - X
    s_storage = np.sum(_grad_x_S(P, X, storage) * V, axis=1) + storage.eta * np.sum(V * V, axis=1)
    gqL = _grad_q_L(Q, X, antistorage)
    s_anti = np.sum(gqL * (np.asarray(antistorage.game.w) - _F(Q, X, antistorage.game)), axis=1)
    return {"worst_storage": float(s_storage.max()), "worst_antistorage": float(s_anti.max())}


@dataclass
class BoundInputs:
    """Samples along a trajectory, grouped in segments on which the path is smooth.

    ``ev`` is ``eps + v`` and ``w_tilde`` the model error; ``v`` alone is
    optional and only reported.
    """

    t: np.ndarray
    segment: np.ndarray
    q: np.ndarray
    x_hat: np.ndarray
    ev: np.ndarray
    w_tilde: np.ndarray
    v: np.ndarray = None


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    alpha_lambda: float
    worst_storage: float
    worst_antistorage: float
    premise_storage_ok: bool
    premise_antistorage_ok: bool
    holds: bool
    resolution_gap: float
    lam: float
    eta: float
    interior_clamp: float
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _segment_integral(t, seg, values, halve=False):
    total = 0.0
    bounds = np.flatnonzero(np.diff(seg)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [seg.size]])
    for s, e in zip(starts, ends):
        ts, vs = t[s:e], values[s:e]
        if halve and ts.size > 2:
            idx = np.arange(0, ts.size, 2)
            if idx[-1] != ts.size - 1:
                idx = np.append(idx, ts.size - 1)
            ts, vs = ts[idx], vs[idx]
        if ts.size >= 2:
            total += trapezoid(vs, ts)
    return float(total)


def check_dissipation_bound(inputs, lam, storage, antistorage, require_resolution=True):
    """Evaluate both sides of the bound along sampled trajectory data.

    Integrals use the trapezoid rule within each segment; the same integrals
    on every other sample give the resolution gap.

    Raises
    ------
    InsufficientResolution
        If ``require_resolution`` and the relative step-halving gap is >= 1%.
    """
    t, seg = np.asarray(inputs.t), np.asarray(inputs.segment)
    Q, X = np.atleast_2d(inputs.q), np.atleast_2d(inputs.x_hat)
    EV, WT = np.atleast_2d(inputs.ev), np.atleast_2d(inputs.w_tilde)
    eta, theta = storage.eta, storage.theta_array

    V = _choice_batch(Q, eta, theta) - X
    dev = np.sum(V * V, axis=1)
    g_abs = np.abs(_g_batch(Q, X, EV, WT, lam, storage, antistorage))

    x0, q0 = X[0], Q[0]
    alpha_lambda = lam * storage_S(q0, x0, storage) + antistorage_L(q0, x0, antistorage)
    scale = 1.0 / (lam**2 * eta)

    lhs = _segment_integral(t, seg, dev)
    g_int = _segment_integral(t, seg, g_abs)
    rhs = scale * (alpha_lambda + g_int)
    lhs_h = _segment_integral(t, seg, dev, halve=True)
    rhs_h = scale * (alpha_lambda + _segment_integral(t, seg, g_abs, halve=True))
    gap = max(_rel(lhs, lhs_h), _rel(rhs, rhs_h))
    if require_resolution and gap >= RESOLUTION_LIMIT:
        raise InsufficientResolution(f"step-halving gap {gap:.3%} >= {RESOLUTION_LIMIT:.0%}")

    premises = check_premises(Q, X, Q, storage, antistorage)
    return BoundReport(
        lhs=lhs,
        rhs=rhs,
        alpha_lambda=float(alpha_lambda),
        worst_storage=premises["worst_storage"],
        worst_antistorage=premises["worst_antistorage"],
        premise_storage_ok=premises["worst_storage"] <= PREMISE_TOL,
        premise_antistorage_ok=premises["worst_antistorage"] <= PREMISE_TOL,
        holds=bool(lhs <= rhs),
        resolution_gap=float(gap),
        lam=float(lam),
        eta=float(eta),
        interior_clamp=float(storage.interior_clamp),
    )


def _rel(a, b):
    denom = max(abs(a), 1e-300)
    return abs(a - b) / denom


def bound_inputs_from_meanfield(traj):
    """Bound inputs for a mean-field run; one smooth segment.

    Replayed noise channels in the configuration are evaluated at the sample
    times. With ``v_mode="derived"`` and a positive delay the estimation
    noise ``C(p(t - d)) - C(p(t))`` is rebuilt from the stored path.
    """
    cfg = traj.config
    spec = cfg.protocol
    t, Q, X = traj.t, traj.q, traj.x
    n = Q.shape[1]
    EV = np.zeros_like(X)
    WT = np.zeros_like(Q)
    V_only = np.zeros_like(X)
    if cfg.epsilon is not None:
        EV += np.array([cfg.epsilon(s) for s in t])
    if cfg.v_mode == "replay":
        V_only = np.array([cfg.v(s) for s in t])
    elif cfg.v_mode == "derived" and cfg.d > 0:
        lag = t - cfg.d
        P_del = np.column_stack([np.interp(lag, t, Q[:, i], left=cfg.q0[i]) for i in range(n)])
        V_only = _choice_batch(P_del, spec.eta, spec.theta_array) - _choice_batch(
            Q, spec.eta, spec.theta_array
        )
    EV += V_only
    if cfg.w_tilde is not None:
        WT += np.array([cfg.w_tilde(s) for s in t])
    return BoundInputs(t=t, segment=np.zeros(t.size, dtype=int), q=Q, x_hat=X, ev=EV, w_tilde=WT, v=V_only)


def bound_inputs_from_finite(traj):
    """Bound inputs from a dense finite-population KLD-RL run.

    Each interval between consecutive arrivals is a segment; its endpoints
    are sampled from both sides. On a segment ``[t1, t2]`` the interpolated
    state is linear, ``eps + v = dX / (lam dt) - C(p) + Xhat`` and
    ``w_tilde = F(q, Xhat) - F(q, X(t1))``.
    """
    from .finite_sim import mean_delayed_choice

    cfg = traj.config
    if traj.dense_t is None:
        raise ValueError("finite run lacks a dense log; set record_dense=True")
    spec = cfg.protocol
    lam = cfg.lam
    knots, states = traj.knots()
    dt_all, dq_all = traj.dense_t, traj.dense_q

    seg = np.searchsorted(knots, dt_all, side="right") - 1
    keep = seg < knots.size - 1
    # interior knots close the previous segment as well
    on_knot = np.isin(dt_all, knots[1:-1]) & keep
    t = np.concatenate([dt_all[keep], dt_all[on_knot]])
    s = np.concatenate([seg[keep], seg[on_knot] - 1])
    Q = np.vstack([dq_all[keep], dq_all[on_knot]])
    order = np.lexsort((t, s))
    t, s, Q = t[order], s[order], Q[order]

    t1, t2 = knots[s], knots[s + 1]
    x1, x2 = states[s], states[s + 1]
    frac = ((t - t1) / (t2 - t1))[:, None]
    X_hat = x1 + frac * (x2 - x1)
    C = _choice_batch(Q, spec.eta, spec.theta_array)
    EV = (x2 - x1) / (lam * (t2 - t1))[:, None] - C + X_hat
    WT = _F(Q, X_hat, cfg.game) - _F(Q, x1, cfg.game)

    lags = np.floor(t).astype(int)
    cache = {}
    V_only = np.empty_like(C)
    for i, (lag_t, tt) in enumerate(zip(lags, t)):
        if lag_t not in cache:
            cache[lag_t] = mean_delayed_choice(traj, float(lag_t)) if cfg.observation != "perfect" else None
        base = cache[lag_t]
        V_only[i] = (base if base is not None else C[i]) - C[i]
    return BoundInputs(t=t, segment=s, q=Q, x_hat=X_hat, ev=EV, w_tilde=WT, v=V_only)


def passivity_integral_check(traj, storage):
    """Integral dissipation inequality for the storage along a noise-free mean-field run.

    Returns
    -------
    lhs : float
        ``S(T) - S(0)``.
    rhs : float
        ``int (p_dot'x_dot / lam - lam eta V'V) dt`` with model derivatives.
    """
    cfg = traj.config
    lam, eta = cfg.lam, storage.eta
    t, Q, X = traj.t, traj.q, traj.x
    V = _choice_batch(Q, eta, storage.theta_array) - X
    q_dot = np.asarray(cfg.game.w) - _F(Q, X, cfg.game)
    x_dot = lam * V
    integrand = np.sum(q_dot * x_dot, axis=1) / lam - lam * eta * np.sum(V * V, axis=1)
    rhs = float(trapezoid(integrand, t))
    lhs = storage_S(Q[-1], X[-1], storage) - storage_S(Q[0], X[0], storage)
    return lhs, rhs
