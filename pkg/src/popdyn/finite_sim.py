"""Event-driven simulation of N revising agents coupled to the job dynamics.

Revision opportunities arrive on a single aggregate Poisson clock of rate
``N * lam`` and are handed to a uniformly chosen agent, which is equivalent
to giving every agent its own rate-``lam`` clock. Between arrivals the job
levels follow the game ODE with the population state frozen; the ODE is
advanced by fixed-step RK4 with steps split at arrivals, integer times
(estimate updates) and output sample times.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import RngSpec, make_rng
from .exceptions import ConfigError
from .game import RESOURCE_COLLECTION, GameParams, completion_rates, solve_equilibrium
from .network import CommGraph, EstimateBank, choose_observers, sample_er_digraph
from .protocols import KLDRL, Smith, kld_rl_choice, smith_varrho
from .utils.validation import check_counts

__all__ = [
    "SimConfig",
    "JumpTrajectory",
    "run_finite",
    "transition_row",
    "interpolate",
    "epsilon_error",
    "noise_w",
    "noise_v",
    "make_protocol",
    "FiniteSimulator",
    "tail_statistics",
    "tail_window_stats",
]

DEFAULT_Q0 = (100.0, 200.0, 300.0)
SAMPLE_EVERY = 0.5
_TIME_EPS = 1e-12


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one finite-population replica.

    ``d`` is the revision delay in whole time units. ``observation`` is either
    ``"consensus"`` (observers plus neighbour averaging, updated at integer
    times) or ``"perfect"`` (every reviser reads the current true payoff,
    delay ignored).
    """

    N: int
    protocol: object
    lam: float
    d: int = 10
    T: float = 1000.0
    h: float = 0.01
    game: GameParams = RESOURCE_COLLECTION
    q0: tuple = DEFAULT_Q0
    graph_prob: float = 0.2
    rng: RngSpec = field(default_factory=RngSpec)
    initial_counts: tuple = None
    observation: str = "consensus"
    observer_fraction: float = 0.1
    include_self: bool = False
    sample_every: float = SAMPLE_EVERY
    record_dense: bool = False

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N}")
        if not isinstance(self.protocol, (KLDRL, Smith)):
            raise ConfigError(f"protocol must be KLDRL or Smith, got {self.protocol!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lam must be a finite nonnegative rate, got {self.lam}")
        if int(self.d) != self.d or self.d < 0:
            raise ConfigError(f"d must be a nonnegative integer number of time units, got {self.d}")
        if not (self.T > 0):
            raise ConfigError(f"T must be positive, got {self.T}")
        if not (0 < self.h <= 0.1):
            raise ConfigError(f"h must lie in (0, 0.1], got {self.h}")
        if not (self.sample_every > 0):
            raise ConfigError("sample_every must be positive")
        if self.observation not in ("consensus", "perfect"):
            raise ConfigError(f"unknown observation mode {self.observation!r}")
        q0 = np.asarray(self.q0, dtype=float)
        if q0.shape != (self.game.n,) or np.any(q0 < 0):
            raise ConfigError(f"q0 must be {self.game.n} nonnegative job levels, got {self.q0}")
        if isinstance(self.protocol, KLDRL) and len(self.protocol.theta) != self.game.n:
            raise ConfigError("theta length does not match the number of tasks")
        if self.initial_counts is not None:
            try:
                check_counts(self.initial_counts, self.N)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            if len(self.initial_counts) != self.game.n:
                raise ConfigError("initial_counts length does not match the number of tasks")
        if self.observation == "consensus" and self.N >= 2 and not 0 < self.graph_prob <= 1:
            raise ConfigError(f"graph_prob must lie in (0, 1], got {self.graph_prob}")


@dataclass
class JumpTrajectory:
    """Record of one finite-population run.

    Attributes
    ----------
    event_times, event_agents, event_from, event_to : ndarray
        Every revision opportunity, including those where the agent keeps
        its strategy.
    event_states : ndarray of shape (n_events, n)
        Population state right after each revision.
    x0 : ndarray of shape (n,)
        Population state at time zero.
    sample_t, sample_x, sample_q : ndarray
        Output samples every ``sample_every`` time units.
    dense_t, dense_q : ndarray or None
        Job levels at every RK4 step end when ``record_dense`` was set.
    estimate_log : ndarray of shape (n_updates, N, n) or None
        Bank estimates after every integer-time update (dense runs only).
    """

    config: SimConfig
    x0: np.ndarray
    event_times: np.ndarray
    event_agents: np.ndarray
    event_from: np.ndarray
    event_to: np.ndarray
    event_states: np.ndarray
    sample_t: np.ndarray
    sample_x: np.ndarray
    sample_q: np.ndarray
    graph: CommGraph = None
    observers: np.ndarray = None
    dense_t: np.ndarray = None
    dense_q: np.ndarray = None
    estimate_log: np.ndarray = None

    @property
    def n_events(self):
        return self.event_times.size

    @property
    def qmax(self):
        return np.max(self.sample_q, axis=1)

    def knots(self):
        """Interpolation knots: time zero followed by every arrival time."""
        return np.concatenate([[0.0], self.event_times]), np.vstack([self.x0, self.event_states])

    def state_at(self, t):
        """Piecewise-constant population state (right-continuous)."""
        times, states = self.knots()
        idx = np.searchsorted(times, t, side="right") - 1
        return states[np.clip(idx, 0, None)]

    def to_csv(self):
        """Sample table with columns ``t, X1..Xn, q1..qn, qmax``."""
        n = self.sample_x.shape[1]
        header = ["t"] + [f"X{i + 1}" for i in range(n)] + [f"q{i + 1}" for i in range(n)] + ["qmax"]
        rows = np.column_stack([self.sample_t, self.sample_x, self.sample_q, self.qmax])
        return _write_csv(header, rows)

    def events_to_csv(self):
        """Event table with columns ``t, agent, from, to``."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "agent", "from", "to"])
        for t, a, f, g in zip(self.event_times, self.event_agents, self.event_from, self.event_to):
            writer.writerow([repr(float(t)), int(a), int(f), int(g)])
        return buf.getvalue()


def _write_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def make_protocol(name, n, eta=None, theta=None, varrho=None, M_q=300.0, game=None):
    """Build a protocol spec; ``theta=None`` means the game's equilibrium allocation."""
    if name == "kldrl":
        if theta is None:
            theta = solve_equilibrium(game or RESOURCE_COLLECTION).x_star
        return KLDRL(eta=eta, theta=tuple(theta))
    if name == "smith":
        return Smith(varrho=smith_varrho(n, M_q) if varrho is None else varrho)
    raise ConfigError(f"unknown protocol {name!r}")


def transition_row(counts, rho):
    """One-step law of the population state given a revision matrix.

    Parameters
    ----------
    counts : array-like of int, shape (n,)
    rho : array-like of shape (n, n)
        ``rho[i, j]`` is the probability that a reviser playing ``i`` moves to ``j``.

    Returns
    -------
    dict
        Maps count tuples to probabilities; the self-loop holds the residual mass.
    """
    counts = check_counts(counts)
    rho = np.asarray(rho, dtype=float)
    n = counts.size
    if rho.shape != (n, n) or np.any(rho < -1e-15) or np.any(np.abs(rho.sum(axis=1) - 1) > 1e-12):
        raise ValueError("every rho row must be a probability distribution")
    N = counts.sum()
    x = counts / N
    row = {}
    moved = 0.0
    for i in range(n):
        for j in range(n):
            if i == j or x[i] == 0 or rho[i, j] == 0:
                continue
            y = counts.copy()
            y[i] -= 1
            y[j] += 1
            mass = x[i] * rho[i, j]
            row[tuple(int(c) for c in y)] = mass
            moved += mass
    row[tuple(int(c) for c in counts)] = 1.0 - moved
    return row


def _rk4_advance(q, coef, half_alpha, w, t0, t1, h, dense_t=None, dense_q=None):
    """Advance ``q_i' = w_i - coef_i tanh(half_alpha_i q_i)`` from ``t0`` to ``t1``.

    Tasks decouple once the population state is frozen, so each component is
    stepped as a scalar ODE. Negative job levels are clamped to zero.
    """
    n = len(q)
    dt = t1 - t0
    elapsed = 0.0
    while dt - elapsed > _TIME_EPS:
        last = dt - elapsed <= h * (1.0 + 1e-9)
        step = dt - elapsed if last else h
        for i in range(n):
            c, a, wi, qi = coef[i], half_alpha[i], w[i], q[i]
            if c == 0.0:
                qi += step * wi
            else:
                k1 = wi - c * math.tanh(a * qi)
                k2 = wi - c * math.tanh(a * (qi + 0.5 * step * k1))
                k3 = wi - c * math.tanh(a * (qi + 0.5 * step * k2))
                k4 = wi - c * math.tanh(a * (qi + step * k3))
                qi += step * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
            q[i] = qi if qi > 0.0 else 0.0
        elapsed += step
        if dense_t is not None:
            dense_t.append(t1 if last else t0 + elapsed)
            dense_q.append(tuple(q))
        if last:
            break
    return q


def _sample_index(cum, u):
    target = u * cum[-1]
    for i, c in enumerate(cum):
        if target < c:
            return i
    return len(cum) - 1


def run_finite(config):
    """Simulate one replica and return its :class:`JumpTrajectory`.

    Draw order from the replica stream: graph, observers, initial strategies,
    then per arrival the waiting time, the reviser and its new strategy.
    """
    cfg = config
    game = cfg.game
    n, N = game.n, int(cfg.N)
    rng = make_rng(cfg.rng)
    perfect = cfg.observation == "perfect"

    graph = observers = None
    if not perfect:
        if N >= 2:
            graph = sample_er_digraph(N, cfg.graph_prob, rng)
            weights = graph.weight_matrix(cfg.include_self)
        else:
            weights = np.ones((1, 1))
        observers = choose_observers(N, rng, cfg.observer_fraction)
        bank = EstimateBank(N, n, observers, delay=cfg.d)

    if cfg.initial_counts is None:
        strategies = rng.integers(n, size=N)
    else:
        strategies = np.repeat(np.arange(n), np.asarray(cfg.initial_counts, dtype=int))
    counts = np.bincount(strategies, minlength=n).astype(np.int64)
    strategies = strategies.tolist()
    counts_l = counts.tolist()
    x0 = counts / N

    R = game.R
    half_alpha = [0.5 * a for a in game.alpha]
    beta = game.beta
    w = game.w
    q = [float(v) for v in cfg.q0]

    def coefficients():
        return [R[i] * (counts_l[i] / N) ** beta[i] for i in range(n)]

    coef = coefficients()

    is_kld = isinstance(cfg.protocol, KLDRL)
    if is_kld:
        eta, theta = cfg.protocol.eta, cfg.protocol.theta_array
        log_theta = np.log(theta)
    else:
        varrho = cfg.protocol.varrho

    total_rate = N * cfg.lam
    next_event = rng.exponential(1.0 / total_rate) if total_rate > 0 else math.inf

    ev_t, ev_a, ev_f, ev_g, ev_x = [], [], [], [], []
    s_t, s_x, s_q = [], [], []
    dense_t = [0.0] if cfg.record_dense else None
    dense_q = [tuple(q)] if cfg.record_dense else None
    est_log = [] if (cfg.record_dense and not perfect) else None

    t = 0.0
    next_int = 0
    sample_k = 0
    next_sample = 0.0
    T = float(cfg.T)
    while True:
        if not perfect and t == next_int:
            bank.update(weights, q)
            if est_log is not None:
                est_log.append(bank.estimates.copy())
            next_int += 1
        if t == next_sample:
            s_t.append(t)
            s_x.append([c / N for c in counts_l])
            s_q.append(list(q))
            sample_k += 1
            next_sample = sample_k * cfg.sample_every
        if t >= T:
            break
        target = min(next_event, float(next_int) if not perfect else math.inf, next_sample, T)
        _rk4_advance(q, coef, half_alpha, w, t, target, cfg.h, dense_t, dense_q)
        t = target
        if t == next_event:
            agent = int(rng.integers(N))
            cur = strategies[agent]
            if perfect:
                phat = np.asarray(q)
            else:
                phat = bank.delayed(agent, math.floor(t), cfg.d)
            u = rng.random()
            if is_kld:
                z = (phat - phat.max()) / eta + log_theta
                probs = np.exp(z - z.max())
            else:
                gaps = varrho * np.maximum(phat - phat[cur], 0.0)
                gaps[cur] = 0.0
                off = gaps.sum()
                if off > 1.0 + 1e-12:
                    raise ValueError(
                        f"Smith row mass {off:.6g} > 1 at t={t:.6g}; varrho too large for payoffs"
                    )
                gaps[cur] = 1.0 - off
                probs = gaps
            new = _sample_index(np.cumsum(probs).tolist(), u)
            if new != cur:
                strategies[agent] = new
                counts_l[cur] -= 1
                counts_l[new] += 1
                coef = coefficients()
            ev_t.append(t)
            ev_a.append(agent)
            ev_f.append(cur)
            ev_g.append(new)
            ev_x.append([c / N for c in counts_l])
            next_event = t + rng.exponential(1.0 / total_rate)

    return JumpTrajectory(
        config=cfg,
        x0=x0,
        event_times=np.asarray(ev_t, dtype=float),
        event_agents=np.asarray(ev_a, dtype=np.int64),
        event_from=np.asarray(ev_f, dtype=np.int64),
        event_to=np.asarray(ev_g, dtype=np.int64),
        event_states=np.asarray(ev_x, dtype=float).reshape(-1, n),
        sample_t=np.asarray(s_t),
        sample_x=np.asarray(s_x),
        sample_q=np.asarray(s_q),
        graph=graph,
        observers=observers,
        dense_t=None if dense_t is None else np.asarray(dense_t),
        dense_q=None if dense_q is None else np.asarray(dense_q),
        estimate_log=None if not est_log else np.asarray(est_log),
    )


def interpolate(traj, t):
    """Piecewise-linear interpolation of the population state through the arrivals.

    Time zero acts as the first knot, so the path is defined on
    ``[0, last arrival]``. ``t`` may be a scalar or an array.
    """
    times, states = traj.knots()
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0) or np.any(t_arr > times[-1]):
        raise ValueError(f"t outside [0, {times[-1]}]")
    out = np.column_stack([np.interp(t_arr, times, states[:, i]) for i in range(states.shape[1])])
    return out[0] if np.ndim(t) == 0 else out


def _bracket(traj, t):
    times, states = traj.knots()
    k = np.searchsorted(times, t, side="right") - 1
    if k < 0 or k + 1 >= times.size or t <= times[k] or t >= times[k + 1]:
        raise ValueError(f"t={t} is not strictly between two consecutive arrivals")
    return times[k], times[k + 1], states[k], states[k + 1]


def mean_delayed_choice(traj, t):
    """Population average of the KLD-RL choice evaluated at each agent's delayed estimate.

    A uniformly chosen reviser draws from this distribution, so it is the
    drift of the jump process between arrivals.
    """
    cfg = traj.config
    spec = cfg.protocol
    if cfg.observation == "perfect":
        return kld_rl_choice(_q_at(traj, t), spec.eta, spec.theta_array)
    if traj.estimate_log is None:
        raise ValueError("trajectory was recorded without estimates; rerun with record_dense=True")
    lag = math.floor(t) - cfg.d
    if lag < 0:
        est = np.zeros((cfg.N, cfg.game.n))
    else:
        est = traj.estimate_log[lag]
    z = (est - est.max(axis=1, keepdims=True)) / spec.eta + np.log(spec.theta_array)
    C = np.exp(z)
    C /= C.sum(axis=1, keepdims=True)
    return C.mean(axis=0)


def _q_at(traj, t):
    if traj.dense_t is None:
        raise ValueError("job levels between samples need record_dense=True")
    return np.array([np.interp(t, traj.dense_t, traj.dense_q[:, i]) for i in range(traj.dense_q.shape[1])])


def epsilon_error(traj, t, choice=None):
    """Finite-population error making the interpolated path solve the mean dynamic.

    ``(X(t2) - X(t1)) / (lam (t2 - t1)) - (choice - Xhat(t))`` for
    ``t1 < t < t2`` consecutive knots. ``choice`` defaults to
    :func:`mean_delayed_choice`.
    """
    t1, t2, x1, x2 = _bracket(traj, t)
    lam = traj.config.lam
    if choice is None:
        choice = mean_delayed_choice(traj, t)
    x_hat = x1 + (t - t1) / (t2 - t1) * (x2 - x1)
    return (x2 - x1) / (lam * (t2 - t1)) - (np.asarray(choice) - x_hat)


def noise_w(q, x_hat, x_step, params):
    """Model error ``F(q, Xhat) - F(q, X)`` from using the interpolated state."""
    return completion_rates(q, x_hat, params) - completion_rates(q, x_step, params)


def noise_v(p, phat_delayed, eta, theta):
    """Estimation noise ``C(phat(t - d)) - C(p(t))``."""
    return kld_rl_choice(phat_delayed, eta, theta) - kld_rl_choice(p, eta, theta)


def tail_window_stats(t, values, T, start_fraction=0.5):
    """Time-average and standard deviation of a sampled signal over ``[start_fraction T, T]``.

    Both moments use the trapezoid rule on the samples inside the window.
    """
    t, values = np.asarray(t, dtype=float), np.asarray(values, dtype=float)
    mask = t >= start_fraction * T - _TIME_EPS
    ts, vs = t[mask], values[mask]
    if ts.size == 0:
        raise ValueError("no samples in the tail window")
    if ts.size < 2:
        return float(vs.mean()), 0.0
    span = ts[-1] - ts[0]
    mean = float(trapezoid(vs, ts) / span)
    var = float(trapezoid((vs - mean) ** 2, ts) / span)
    return mean, math.sqrt(max(var, 0.0))


def tail_statistics(traj, start_fraction=0.5):
    """Time-average and standard deviation of ``||q||_inf`` over ``[start_fraction T, T]``."""
    return tail_window_stats(traj.sample_t, traj.qmax, traj.config.T, start_fraction)


class FiniteSimulator(BaseEstimator):
    """Finite-population closed loop as an estimator; :meth:`fit` runs one replica.

    Parameters
    ----------
    N : int, default=10
        Population size.
    protocol : {"kldrl", "smith"}, default="kldrl"
    eta : float, default=0.04
        KLD-RL temperature.
    theta : array-like, default=None
        KLD-RL reference; ``None`` uses the game's equilibrium allocation.
    varrho : float, default=None
        Smith scale; ``None`` uses ``1 / ((n - 1) M_q)``.
    M_q : float, default=300.0
    lam : float, default=0.1
        Per-agent revision rate.
    d : int, default=10
        Revision delay in time units.
    T, h : float
        Horizon and RK4 step.
    game : GameParams, default=None
        ``None`` means the three-patch resource-collection game.
    q0 : tuple, default=(100, 200, 300)
    graph_prob : float, default=0.2
    observation : {"consensus", "perfect"}, default="consensus"
    initial_counts : tuple, default=None
    seed, stream : int
        Replica seed and stream of the PCG64 generator.
    record_dense : bool, default=False
        Keep job levels at every RK4 step and the estimate log.

    Attributes
    ----------
    trajectory_ : JumpTrajectory
    tail_mean_, tail_sd_ : float
        Mean and standard deviation of ``||q(t)||_inf`` over the second half.
    """

    def __init__(
        self,
        N=10,
        protocol="kldrl",
        eta=0.04,
        theta=None,
        varrho=None,
        M_q=300.0,
        lam=0.1,
        d=10,
        T=1000.0,
        h=0.01,
        game=None,
        q0=DEFAULT_Q0,
        graph_prob=0.2,
        observation="consensus",
        initial_counts=None,
        seed=0,
        stream=0,
        record_dense=False,
    ):
        self.N = N
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
        self.graph_prob = graph_prob
        self.observation = observation
        self.initial_counts = initial_counts
        self.seed = seed
        self.stream = stream
        self.record_dense = record_dense

    def make_config(self):
        game = self.game or RESOURCE_COLLECTION
        try:
            spec = make_protocol(
                self.protocol, game.n, eta=self.eta, theta=self.theta,
                varrho=self.varrho, M_q=self.M_q, game=game,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return SimConfig(
            N=self.N,
            protocol=spec,
            lam=self.lam,
            d=self.d,
            T=self.T,
            h=self.h,
            game=game,
            q0=tuple(self.q0),
            graph_prob=self.graph_prob,
            rng=RngSpec(seed=self.seed, stream=self.stream),
            initial_counts=None if self.initial_counts is None else tuple(self.initial_counts),
            observation=self.observation,
            record_dense=self.record_dense,
        )

    def fit(self, X=None, y=None):
        self.config_ = self.make_config()
        self.trajectory_ = run_finite(self.config_)
        self.tail_mean_, self.tail_sd_ = tail_statistics(self.trajectory_)
        return self

    def score(self, X=None, y=None):
        """Negative tail mean of ``||q||_inf``, so larger is better."""
        check_is_fitted(self, "trajectory_")
        return -self.tail_mean_
