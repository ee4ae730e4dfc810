"""Deterministic mean dynamics: the evolutionary dynamics model and the delayed closed loop.

The closed loop couples

    q' = w - F(q, x) + w_tilde(t)
    x' = lam (C(p(t - d)) - x) + lam (eps(t) + v(t)),   p = q,

and is stepped with fixed-step RK4 by the method of steps. Delayed payoffs
are read from a history of grid values with linear interpolation, and the
pre-history is held at ``q0``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ConfigError, NumericalBlowup
from .game import RESOURCE_COLLECTION, GameParams
from .protocols import KLDRL, Smith, edm_velocity
from .utils.validation import check_simplex

__all__ = [
    "TimeSeries",
    "MeanFieldConfig",
    "MeanFieldTrajectory",
    "integrate_closed_loop",
    "edm_only",
    "MeanFieldModel",
]

BLOWUP = 1e9


class TimeSeries:
    """Vector-valued signal defined by samples, linearly interpolated in time.

    Outside the sampled range the end values are held.
    """

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] != self.times.size:
            raise ValueError("times and values disagree in length")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("times must be nondecreasing")

    def __call__(self, t):
        return np.array([np.interp(t, self.times, col) for col in self.values.T])


@dataclass(frozen=True)
class MeanFieldConfig:
    """Closed-loop mean-field configuration.

    ``v_mode`` selects the estimation-noise channel: ``"derived"`` uses the
    delayed payoff ``p(t - d)`` inside the choice map, ``"zero"`` ignores the
    delay, ``"replay"`` adds the recorded series ``v`` on top of ``C(p(t))``.
    ``epsilon`` and ``w_tilde`` are optional callables of time.
    """

    protocol: object
    lam: float
    q0: tuple
    x0: tuple
    game: GameParams = RESOURCE_COLLECTION
    d: float = 0.0
    T: float = 100.0
    h: float = 0.01
    epsilon: object = None
    w_tilde: object = None
    v: object = None
    v_mode: str = "derived"
    record_every: int = 1
    clamp_q: bool = True

    def __post_init__(self):
        if not isinstance(self.protocol, (KLDRL, Smith)):
            raise ConfigError(f"unsupported protocol {self.protocol!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lam must be finite and nonnegative, got {self.lam}")
        if not (self.T > 0 and self.h > 0):
            raise ConfigError("T and h must be positive")
        if self.d < 0:
            raise ConfigError("d must be nonnegative")
        if self.d > 0:
            ratio = self.d / self.h
            if abs(ratio - round(ratio)) > 1e-9 or self.h > self.d / 10 + 1e-15:
                raise ConfigError(f"h={self.h} must divide d={self.d} and satisfy h <= d/10")
        if self.v_mode not in ("derived", "zero", "replay"):
            raise ConfigError(f"unknown v_mode {self.v_mode!r}")
        if self.v_mode == "replay" and self.v is None:
            raise ConfigError("v_mode='replay' needs a v series")
        n = self.game.n
        try:
            check_simplex(self.x0, n, atol=1e-9, name="x0")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.q0) != n or min(self.q0) < 0:
            raise ConfigError("q0 must hold n nonnegative job levels")


@dataclass
class MeanFieldTrajectory:
    t: np.ndarray
    q: np.ndarray
    x: np.ndarray
    config: MeanFieldConfig = field(repr=False, default=None)

    @property
    def qmax(self):
        return np.max(self.q, axis=1)

    def to_csv(self):
        from .finite_sim import _write_csv

        n = self.x.shape[1]
        header = ["t"] + [f"X{i + 1}" for i in range(n)] + [f"q{i + 1}" for i in range(n)] + ["qmax"]
        return _write_csv(header, np.column_stack([self.t, self.x, self.q, self.qmax]))


def _choice_py(p, eta, log_theta):
    pmax = max(p)
    z = [(pi - pmax) / eta + lt for pi, lt in zip(p, log_theta)]
    e = [math.exp(v) for v in z]
    s = math.fsum(e)
    return [v / s for v in e]


def _smith_velocity_py(p, x, varrho):
    n = len(p)
    v = [0.0] * n
    for i in range(n):
        inflow = 0.0
        out = 0.0
        for j in range(n):
            if j == i:
                continue
            inflow += x[j] * varrho * max(p[i] - p[j], 0.0)
            out += varrho * max(p[j] - p[i], 0.0)
        v[i] = inflow - x[i] * out
    return v


def integrate_closed_loop(config):
    """Integrate the closed loop; returns a :class:`MeanFieldTrajectory`.

    Raises
    ------
    NumericalBlowup
        If ``||q||_inf`` exceeds 1e9.
    """
    cfg = config
    game = cfg.game
    n = game.n
    R, beta, w = game.R, game.beta, game.w
    half_alpha = [0.5 * a for a in game.alpha]
    lam, h = float(cfg.lam), float(cfg.h)
    spec = cfg.protocol
    is_kld = isinstance(spec, KLDRL)
    if is_kld:
        eta = spec.eta
        log_theta = [math.log(t) for t in spec.theta]

    n_steps = int(math.ceil(cfg.T / h - 1e-9))
    delay_steps = int(round(cfg.d / h)) if cfg.d > 0 else 0
    use_delay = delay_steps > 0 and cfg.v_mode == "derived"
    q0 = [float(v) for v in cfg.q0]
    hist = [q0]  # payoff at grid times 0, h, 2h, ...

    def delayed_p(step_idx, frac):
        # payoff at time (step_idx + frac) * h - d
        pos = step_idx + frac - delay_steps
        if pos <= 0:
            return q0
        k = int(pos)
        r = pos - k
        if r == 0.0:
            return hist[k]
        a, b = hist[k], hist[k + 1] if k + 1 < len(hist) else hist[k]
        return [ai + r * (bi - ai) for ai, bi in zip(a, b)]

    eps_fn, wt_fn, v_fn = cfg.epsilon, cfg.w_tilde, cfg.v if cfg.v_mode == "replay" else None

    def rhs(t, q, x, p_del):
        dq = [
            w[i] - R[i] * math.tanh(half_alpha[i] * max(q[i], 0.0)) * max(x[i], 0.0) ** beta[i]
            for i in range(n)
        ]
        if wt_fn is not None:
            extra = wt_fn(t)
            dq = [a + b for a, b in zip(dq, extra)]
        if is_kld:
            c = _choice_py(p_del, eta, log_theta)
            dx = [lam * (ci - xi) for ci, xi in zip(c, x)]
        else:
            dx = [lam * v for v in _smith_velocity_py(p_del, x, spec.varrho)]
        if eps_fn is not None:
            dx = [a + lam * b for a, b in zip(dx, eps_fn(t))]
        if v_fn is not None:
            dx = [a + lam * b for a, b in zip(dx, v_fn(t))]
        return dq, dx

    q = q0[:]
    x = [float(v) for v in cfg.x0]
    out_t, out_q, out_x = [0.0], [q[:]], [x[:]]
    for k in range(n_steps):
        t = k * h
        step = min(h, cfg.T - t)
        if use_delay:
            p1, p2, p4 = delayed_p(k, 0.0), delayed_p(k, 0.5), delayed_p(k, 1.0)
        else:
            p1 = p2 = p4 = None
        dq1, dx1 = rhs(t, q, x, p1 or q)
        qa = [a + 0.5 * step * b for a, b in zip(q, dq1)]
        xa = [a + 0.5 * step * b for a, b in zip(x, dx1)]
        dq2, dx2 = rhs(t + 0.5 * step, qa, xa, p2 or qa)
        qb = [a + 0.5 * step * b for a, b in zip(q, dq2)]
        xb = [a + 0.5 * step * b for a, b in zip(x, dx2)]
        dq3, dx3 = rhs(t + 0.5 * step, qb, xb, p2 or qb)
        qc = [a + step * b for a, b in zip(q, dq3)]
        xc = [a + step * b for a, b in zip(x, dx3)]
        dq4, dx4 = rhs(t + step, qc, xc, p4 or qc)
        q = [a + step * (b1 + 2 * b2 + 2 * b3 + b4) / 6.0 for a, b1, b2, b3, b4 in zip(q, dq1, dq2, dq3, dq4)]
        x = [a + step * (b1 + 2 * b2 + 2 * b3 + b4) / 6.0 for a, b1, b2, b3, b4 in zip(x, dx1, dx2, dx3, dx4)]
        if cfg.clamp_q:
            q = [v if v > 0.0 else 0.0 for v in q]
        s = math.fsum(x)
        x = [v / s for v in x]
        if max(abs(v) for v in q) > BLOWUP or not all(map(math.isfinite, q)):
            raise NumericalBlowup(f"||q||_inf exceeded {BLOWUP:g} at t={t + step:.6g}")
        if use_delay:
            hist.append(q)
        if (k + 1) % cfg.record_every == 0 or k + 1 == n_steps:
            out_t.append(t + step)
            out_q.append(q)
            out_x.append(x)
    return MeanFieldTrajectory(
        t=np.asarray(out_t), q=np.asarray(out_q), x=np.asarray(out_x), config=cfg
    )


def edm_only(protocol, lam, p, x0, T, h=0.01):
    """Integrate ``x' = lam V(p, x)`` at a frozen payoff vector.

    Returns
    -------
    t : ndarray of shape (n_steps + 1,)
    x : ndarray of shape (n_steps + 1, n)
    """
    p = np.asarray(p, dtype=float)
    x = check_simplex(x0, p.size, atol=1e-9).copy()
    n_steps = int(math.ceil(T / h - 1e-9))
    ts, xs = [0.0], [x.copy()]
    for k in range(n_steps):
        step = min(h, T - k * h)
        f = lambda y: lam * edm_velocity(p, y, protocol)  # noqa: E731
        k1 = f(x)
        k2 = f(x + 0.5 * step * k1)
        k3 = f(x + 0.5 * step * k2)
        k4 = f(x + step * k3)
        x = x + step * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        x = x / x.sum()
        ts.append(k * h + step)
        xs.append(x.copy())
    return np.asarray(ts), np.asarray(xs)


class MeanFieldModel(BaseEstimator):
    """Mean-field closed loop as an estimator; :meth:`fit` integrates it.

    Parameters
    ----------
    protocol : {"kldrl", "smith"}, default="kldrl"
    eta, theta, varrho, M_q : protocol parameters, as in ``FiniteSimulator``
    lam : float, default=0.1
    d : float, default=0.0
    T, h : float
    game : GameParams, default=None
    q0 : tuple, default=(100, 200, 300)
    x0 : tuple, default=None
        Initial population state; ``None`` means uniform.

    Attributes
    ----------
    trajectory_ : MeanFieldTrajectory
    """

    def __init__(
        self,
        protocol="kldrl",
        eta=0.04,
        theta=None,
        varrho=None,
        M_q=300.0,
        lam=0.1,
        d=0.0,
        T=100.0,
        h=0.01,
        game=None,
        q0=(100.0, 200.0, 300.0),
        x0=None,
        record_every=1,
    ):
        self.protocol = protocol
        self.eta = eta
        self.theta = theta
        self.varrho = varrho
        self.M_q = M_q
        self.lam = lam
        self.d = d
        self.T = T
        self.h = h
        self.game = game
        self.q0 = q0
        self.x0 = x0
        self.record_every = record_every

    def make_config(self):
        from .finite_sim import make_protocol

        game = self.game or RESOURCE_COLLECTION
        try:
            spec = make_protocol(
                self.protocol, game.n, eta=self.eta, theta=self.theta,
                varrho=self.varrho, M_q=self.M_q, game=game,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        x0 = np.full(game.n, 1.0 / game.n) if self.x0 is None else self.x0
        return MeanFieldConfig(
            protocol=spec, lam=self.lam, q0=tuple(self.q0), x0=tuple(x0), game=game,
            d=self.d, T=self.T, h=self.h, record_every=self.record_every,
        )

    def fit(self, X=None, y=None):
        self.config_ = self.make_config()
        self.trajectory_ = integrate_closed_loop(self.config_)
        return self
