import numpy as np
import pytest
from scipy.integrate import solve_ivp
from sklearn.base import clone

from popdyn.exceptions import ConfigError, NumericalBlowup
from popdyn.game import RESOURCE_COLLECTION, completion_rates
from popdyn.meanfield import MeanFieldConfig, MeanFieldModel, TimeSeries, edm_only, integrate_closed_loop
from popdyn.protocols import KLDRL, Smith, edm_velocity, kld_rl_choice

THETA = (0.2, 0.3, 0.5)
Q0 = (100.0, 200.0, 300.0)
W = np.array(RESOURCE_COLLECTION.w)


def closed_loop_rhs(eta, theta, lam):
    def rhs(t, y):
        q, x = y[:3], y[3:]
        return np.concatenate([W - completion_rates(q, x, RESOURCE_COLLECTION), lam * (kld_rl_choice(q, eta, theta) - x)])

    return rhs


class TestEDM:
    def test_kldrl_closed_form(self):
        p = np.array([1.0, 2.0, 3.0])
        x0 = np.array([0.6, 0.3, 0.1])
        t, x = edm_only(KLDRL(0.5, THETA), 0.7, p, x0, T=5.0, h=0.01)
        c = kld_rl_choice(p, 0.5, THETA)
        expected = c + (x0 - c) * np.exp(-0.7 * t)[:, None]
        np.testing.assert_allclose(x, expected, atol=1e-11)

    def test_smith_against_solve_ivp(self):
        spec = Smith(varrho=1 / 600)
        p = np.array([100.0, 200.0, 300.0])
        x0 = np.array([0.5, 0.3, 0.2])
        t, x = edm_only(spec, 1.0, p, x0, T=4.0, h=0.01)
        sol = solve_ivp(lambda s, y: edm_velocity(p, y, spec), (0, 4.0), x0, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(x[-1], sol.y[:, -1], atol=1e-10)
        np.testing.assert_allclose(x.sum(axis=1), 1.0, atol=1e-14)


class TestClosedLoop:
    def test_delay_free_against_solve_ivp(self):
        cfg = MeanFieldConfig(protocol=KLDRL(0.5, THETA), lam=0.3, q0=Q0, x0=(0.6, 0.3, 0.1), T=40.0, h=0.01)
        tr = integrate_closed_loop(cfg)
        sol = solve_ivp(closed_loop_rhs(0.5, np.array(THETA), 0.3), (0, 40.0), np.r_[Q0, 0.6, 0.3, 0.1],
                        rtol=1e-11, atol=1e-11)
        np.testing.assert_allclose(tr.q[-1], sol.y[:3, -1], rtol=1e-8)
        np.testing.assert_allclose(tr.x[-1], sol.y[3:, -1], atol=1e-9)

    def test_delayed_against_method_of_steps(self):
        eta, lam, d = 5.0, 0.5, 2.0
        theta = np.array(THETA)
        cfg = MeanFieldConfig(protocol=KLDRL(eta, THETA), lam=lam, q0=Q0, x0=(1 / 3, 1 / 3, 1 / 3), d=d, T=3 * d, h=0.01)
        tr = integrate_closed_loop(cfg)

        history = [lambda s: np.array(Q0)]
        y = np.r_[Q0, 1 / 3, 1 / 3, 1 / 3]
        for k in range(3):
            past = history[-1]

            def rhs(t, z, past=past):
                q, x = z[:3], z[3:]
                return np.concatenate([W - completion_rates(q, x, RESOURCE_COLLECTION),
                                       lam * (kld_rl_choice(past(t - d), eta, theta) - x)])

            sol = solve_ivp(rhs, (k * d, (k + 1) * d), y, rtol=1e-11, atol=1e-11, dense_output=True)
            y = sol.y[:, -1]
            history.append(lambda s, sol=sol: sol.sol(s)[:3])
        np.testing.assert_allclose(tr.q[-1], y[:3], rtol=1e-7)
        np.testing.assert_allclose(tr.x[-1], y[3:], atol=1e-7)

    def test_converges_to_equilibrium(self, equilibrium):
        tr = MeanFieldModel(lam=0.1, eta=0.04, T=10000.0, h=0.1, record_every=1000).fit().trajectory_
        assert np.max(np.abs(tr.q[-1] - equilibrium.q_star)) < 1e-3
        assert np.max(np.abs(tr.x[-1] - equilibrium.x_star)) < 1e-3

    def test_simplex_and_nonnegative_jobs(self):
        tr = MeanFieldModel(protocol="smith", lam=1.0, T=100.0).fit().trajectory_
        np.testing.assert_allclose(tr.x.sum(axis=1), 1.0, atol=1e-12)
        assert tr.x.min() >= -1e-12 and tr.q.min() >= 0

    def test_blowup(self):
        cfg = MeanFieldConfig(protocol=KLDRL(0.5, THETA), lam=0.1, q0=Q0, x0=(1 / 3, 1 / 3, 1 / 3), T=10.0, h=0.01,
                              w_tilde=lambda t: np.full(3, 1e12))
        with pytest.raises(NumericalBlowup):
            integrate_closed_loop(cfg)

    def test_replayed_noise_shifts_target(self):
        # replaying a zero series must reproduce the delay-free loop
        v = lambda t: np.zeros(3)  # noqa: E731
        cfg = MeanFieldConfig(protocol=KLDRL(0.5, THETA), lam=0.2, q0=Q0, x0=(1 / 3, 1 / 3, 1 / 3), T=5.0, h=0.01,
                              v=v, v_mode="replay")
        base = MeanFieldConfig(protocol=KLDRL(0.5, THETA), lam=0.2, q0=Q0, x0=(1 / 3, 1 / 3, 1 / 3), T=5.0, h=0.01,
                               v_mode="zero")
        np.testing.assert_allclose(integrate_closed_loop(cfg).x, integrate_closed_loop(base).x, atol=1e-15)

    def test_csv(self):
        tr = MeanFieldModel(T=1.0).fit().trajectory_
        lines = tr.to_csv().splitlines()
        assert lines[0] == "t,X1,X2,X3,q1,q2,q3,qmax" and len(lines) == 102


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(d=1.0, h=0.3),
            dict(d=0.5, h=0.1),
            dict(v_mode="bogus"),
            dict(v_mode="replay"),
            dict(x0=(0.5, 0.6, 0.1)),
            dict(q0=(1.0, 2.0)),
            dict(lam=-0.1),
        ],
    )
    def test_invalid(self, kwargs):
        base = dict(protocol=KLDRL(0.5, THETA), lam=0.1, q0=Q0, x0=(1 / 3, 1 / 3, 1 / 3))
        base.update(kwargs)
        with pytest.raises(ConfigError):
            MeanFieldConfig(**base)


class TestHelpers:
    def test_time_series(self):
        ts = TimeSeries([0.0, 1.0, 2.0], [[0.0, 1.0], [1.0, 3.0], [2.0, 5.0]])
        np.testing.assert_allclose(ts(0.5), [0.5, 2.0])
        np.testing.assert_allclose(ts(5.0), [2.0, 5.0])
        with pytest.raises(ValueError):
            TimeSeries([1.0, 0.0], [[0.0], [1.0]])

    def test_model_defaults(self):
        m = MeanFieldModel(T=1.0).fit()
        np.testing.assert_allclose(m.trajectory_.x[0], 1 / 3)
        assert clone(m).get_params()["x0"] is None
