import json
from math import comb

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.stats import multinomial

from popdyn.core import make_rng
from popdyn.exceptions import NotConverged, StateSpaceTooLarge
from popdyn.stationary import (
    StationaryChain,
    batch_means,
    build_chain,
    closed_form_moments,
    enumerate_states,
    moment_estimates,
    monte_carlo_moments,
    stationary_distribution,
    stationary_moments,
)

from .conftest import X_STAR_REF


@pytest.mark.parametrize("N,n", [(1, 2), (5, 3), (10, 3), (7, 4)])
def test_enumeration(N, n):
    space = enumerate_states(N, n)
    assert len(space) == comb(N + n - 1, n - 1)
    assert np.all(space.states.sum(axis=1) == N) and np.all(space.states >= 0)
    assert len({tuple(s) for s in space.states.tolist()}) == len(space)
    assert [tuple(s) for s in space.states.tolist()] == sorted(tuple(s) for s in space.states.tolist())
    for k, s in enumerate(space.states.tolist()):
        assert space.index[tuple(s)] == k


def test_enumeration_limits():
    with pytest.raises(StateSpaceTooLarge):
        enumerate_states(200, 6)
    with pytest.raises(ValueError):
        enumerate_states(0, 3)
    with pytest.raises(ValueError):
        enumerate_states(3, 1)


def test_chain_transitions_brute_force():
    xstar = np.array([0.2, 0.3, 0.5])
    space = enumerate_states(4, 3)
    P = build_chain(xstar, space).toarray()
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)
    # enumerate (agent, new strategy) pairs explicitly
    for k, counts in enumerate(space.states):
        strategies = np.repeat(np.arange(3), counts)
        row = np.zeros(len(space))
        for agent in range(4):
            for j in range(3):
                y = counts.copy()
                y[strategies[agent]] -= 1
                y[j] += 1
                row[space.index[tuple(y.tolist())]] += xstar[j] / 4
        np.testing.assert_allclose(P[k], row, atol=1e-15)


@pytest.mark.parametrize("N", [1, 3, 10])
def test_stationary_is_multinomial(N):
    space = enumerate_states(N, 3)
    mu = stationary_distribution(build_chain(X_STAR_REF, space))
    expected = multinomial.pmf(space.states, N, X_STAR_REF)
    np.testing.assert_allclose(mu, expected, rtol=1e-9, atol=1e-15)


def test_dense_and_power_agree():
    xstar = np.array([0.1, 0.2, 0.3, 0.4])
    P = build_chain(xstar, enumerate_states(6, 4))
    np.testing.assert_allclose(
        stationary_distribution(P, "dense"), stationary_distribution(P, "power"), atol=1e-11
    )
    with pytest.raises(ValueError):
        stationary_distribution(P, "lu")


def test_nonconverged_reducible_chain():
    # two absorbing states: power iteration converges to a non-unique answer,
    # the dense solve yields a vector with a large residual or is singular
    P = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.0]]))
    with pytest.raises((NotConverged, np.linalg.LinAlgError, ValueError)):
        stationary_distribution(P, "dense")


@pytest.mark.parametrize("N", [1, 2, 5, 10, 12])
def test_moments_match_closed_form(N):
    space = enumerate_states(N, 3)
    mu = stationary_distribution(build_chain(X_STAR_REF, space))
    mean, sum_var = stationary_moments(mu, space)
    cf_mean, cf_var = closed_form_moments(X_STAR_REF, N)
    np.testing.assert_allclose(mean, cf_mean, atol=1e-12)
    assert sum_var == pytest.approx(cf_var, abs=1e-12)


def test_reference_variance_value():
    assert closed_form_moments(X_STAR_REF, 10)[1] == pytest.approx(0.05542028720458869, rel=1e-12)


def test_batch_means():
    v = np.arange(100.0)
    mean, se = batch_means(v, n_batches=10)
    batches = v.reshape(10, 10).mean(axis=1)
    assert mean == 49.5
    assert se == pytest.approx(batches.std(ddof=1) / np.sqrt(10))
    with pytest.raises(ValueError):
        batch_means(np.arange(5.0), n_batches=10)


def test_moment_estimates_iid():
    rng = np.random.default_rng(0)
    counts = rng.multinomial(10, X_STAR_REF, size=50_000)
    est = moment_estimates(counts / 10)
    cf_mean, cf_var = closed_form_moments(X_STAR_REF, 10)
    assert np.all(np.abs(est["mean"] - cf_mean) < 4 * est["mean_se"])
    assert abs(est["sum_var"] - cf_var) < 4 * est["sum_var_se"]


def test_monte_carlo_within_error_bars():
    mean, sum_var, se = monte_carlo_moments(X_STAR_REF, 10, 1000, 100_000, rng=make_rng(3))
    cf_mean, cf_var = closed_form_moments(X_STAR_REF, 10)
    assert np.all(np.abs(mean - cf_mean) < 4 * se["mean"])
    assert abs(sum_var - cf_var) < 4 * se["sum_var"]


def test_monte_carlo_deterministic_and_start():
    a = monte_carlo_moments(X_STAR_REF, 5, 0, 500, rng=make_rng(1), n_batches=5, x0_counts=[5, 0, 0])
    b = monte_carlo_moments(X_STAR_REF, 5, 0, 500, rng=make_rng(1), n_batches=5, x0_counts=[5, 0, 0])
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]


class TestStationaryChain:
    def test_fit_and_report(self):
        est = StationaryChain(N=10).fit(X_STAR_REF)
        assert est.get_params() == {"N": 10, "method": "auto"}
        assert est.residual_ < 1e-12
        data = json.loads(est.report().to_json())
        assert data["schema_version"] == 1 and data["n_states"] == comb(12, 2)
        assert data["sum_var"] == pytest.approx(data["closed_form_sum_var"], abs=1e-12)

    def test_csv(self):
        est = StationaryChain(N=2).fit([0.5, 0.5])
        lines = est.mu_to_csv().splitlines()
        assert lines[0] == "c1,c2,mu"
        rows = {tuple(map(int, l.split(",")[:2])): float(l.split(",")[2]) for l in lines[1:]}
        assert rows == pytest.approx({(0, 2): 0.25, (1, 1): 0.5, (2, 0): 0.25})

    def test_rejects_non_simplex(self):
        with pytest.raises(ValueError):
            StationaryChain(N=3).fit([0.5, 0.6])
