import math

import numpy as np
import pytest
from scipy.optimize import brentq
from sklearn.base import clone

from popdyn.exceptions import ConfigError, NoEquilibrium
from popdyn.game import (
    RESOURCE_COLLECTION,
    GameParams,
    TaskAllocationGame,
    completion_rate,
    completion_rates,
    q_rhs,
    solve_equilibrium,
)

from .conftest import Q_BAR_REF, X_STAR_REF


class TestCompletionRate:
    # reference values from 30-digit evaluation of R tanh(alpha q / 2) x**beta
    @pytest.mark.parametrize("q,x,i,expected", [(100.0, 0.5, 0, 1.73333359246272775), (300.0, 0.2, 2, 0.79520301834892925)])
    def test_hand_values(self, q, x, i, expected):
        assert completion_rate(q, x, RESOURCE_COLLECTION, i) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("q,x", [(0.0, 0.5), (100.0, 0.0)])
    def test_zero(self, q, x):
        assert completion_rate(q, x, RESOURCE_COLLECTION, 1) == 0.0

    def test_negative(self):
        with pytest.raises(ValueError):
            completion_rate(-1.0, 0.5, RESOURCE_COLLECTION, 0)

    def test_vectorised_agrees(self):
        q, x = np.array([10.0, 120.0, 300.0]), np.array([0.1, 0.3, 0.6])
        scalar = [completion_rate(q[i], x[i], RESOURCE_COLLECTION, i) for i in range(3)]
        np.testing.assert_allclose(completion_rates(q, x, RESOURCE_COLLECTION), scalar, rtol=1e-15)
        np.testing.assert_allclose(q_rhs(q, x, RESOURCE_COLLECTION), np.array([0.5, 1.0, 2.0]) - scalar)

    def test_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q, x = rng.uniform(0, 400), rng.uniform(0, 1)
            assert completion_rate(q + 1, x, RESOURCE_COLLECTION, 0) >= completion_rate(q, x, RESOURCE_COLLECTION, 0)
            assert completion_rate(q, min(1, x + 0.01), RESOURCE_COLLECTION, 0) >= completion_rate(q, x, RESOURCE_COLLECTION, 0)


class TestEquilibrium:
    def test_reference_values(self, equilibrium):
        assert equilibrium.q_bar == pytest.approx(Q_BAR_REF, rel=1e-12)
        np.testing.assert_allclose(equilibrium.x_star, X_STAR_REF, atol=1e-13)
        assert equilibrium.residual < 1e-10

    def test_rounded_published_allocation(self, equilibrium):
        assert np.max(np.abs(equilibrium.x_star - [0.13, 0.28, 0.59])) < 0.005

    def test_against_brentq(self):
        params = GameParams(R=(3.0, 4.0, 5.0), alpha=(0.05, 0.02, 0.03), beta=(0.8, 0.9, 0.7), w=(0.3, 0.6, 0.9))

        def excess(q):
            return sum((w / (R * math.tanh(a * q / 2))) ** (1 / b) for R, a, b, w in zip(params.R, params.alpha, params.beta, params.w)) - 1

        q_ref = brentq(excess, 1e-6, 1e4, xtol=1e-14)
        eq = solve_equilibrium(params)
        assert eq.q_bar == pytest.approx(q_ref, rel=1e-10)
        np.testing.assert_allclose(completion_rates(eq.q_star, eq.x_star, params), params.w, atol=1e-10)

    def test_infeasible(self):
        params = GameParams(R=3.44, alpha=0.036, beta=0.91, w=(3.0, 3.0, 3.0))
        assert params.feasibility_margin() < 0
        with pytest.raises(NoEquilibrium):
            solve_equilibrium(params)

    def test_feasibility_margin(self):
        assert RESOURCE_COLLECTION.feasibility_margin() > 0


class TestGameParams:
    def test_broadcast(self):
        p = GameParams(R=2.0, alpha=0.1, beta=0.5, w=(0.1, 0.2))
        assert p.R == (2.0, 2.0) and p.n == 2

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(R=-1.0, alpha=0.1, beta=0.5, w=(0.1, 0.2)),
            dict(R=1.0, alpha=0.1, beta=1.5, w=(0.1, 0.2)),
            dict(R=(1.0, 2.0, 3.0), alpha=0.1, beta=0.5, w=(0.1, 0.2)),
            dict(R=1.0, alpha=0.1, beta=0.5, w=(0.1,)),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            GameParams(**kwargs)


class TestEstimator:
    def test_fit_predict(self, equilibrium):
        game = TaskAllocationGame().fit()
        np.testing.assert_allclose(game.x_star_, equilibrium.x_star)
        rows = np.hstack([game.q_star_, game.x_star_])[None, :]
        np.testing.assert_allclose(game.predict(rows), 0.0, atol=1e-10)

    def test_get_params_clone(self):
        game = TaskAllocationGame(w=(0.5, 0.5))
        assert clone(game).get_params()["w"] == (0.5, 0.5)
