import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qflrl import statest
from qflrl.numkit import RngStream


def test_uniform_states_are_on_the_sphere():
    y = statest.sample_state_uniform(RngStream(0), 50_000)
    assert np.allclose(np.linalg.norm(y, axis=1), 1)
    assert np.allclose(y.mean(axis=0), 0, atol=0.01)
    assert np.allclose(y.T @ y / len(y), np.eye(3) / 3, atol=0.01)


def test_outcome_frequencies():
    plan = statest.MeasurementPlan(np.array([[0, 0, 1.0]]))
    y = np.array([[0.0, 0.0, 0.6]])
    x = statest.simulate_outcomes(np.repeat(y, 40_000, axis=0), plan, RngStream(1))
    assert abs(x.mean() - 0.8) < 0.01
    with pytest.raises(ValueError):
        statest.simulate_outcomes(np.array([[0, 0, 1.5]]), plan, RngStream(1))
    with pytest.raises(ValueError):
        statest.MeasurementPlan(np.array([[1.0, 1.0, 0.0]]))


def test_no_measurements_gives_prior_mean():
    plan = statest.MeasurementPlan(np.zeros((0, 3)))
    est = statest.BayesOracle(plan, 10_000, RngStream(0)).estimate(np.zeros((2, 0), int))
    assert np.array_equal(est, np.zeros((2, 3)))


def test_single_z_outcome_posterior_mean():
    # prior uniform on the sphere, likelihood (1 + z)/2: E[z | 1] = 1/3
    plan = statest.MeasurementPlan(np.array([[0, 0, 1.0]]))
    oracle = statest.BayesOracle(plan, 400_000, RngStream(2))
    est = oracle.estimate(np.array([1]))
    assert abs(est[2] - 1 / 3) < 5e-3 and np.allclose(est[:2], 0, atol=5e-3)


@given(st.integers(0, 2**16))
def test_oracle_symmetry_under_outcome_flip(seed):
    """Flipping every outcome maps the posterior mean to minus itself."""
    plan = statest.default_plan(2)
    oracle = statest.BayesOracle(plan, 20_000, RngStream(7))
    x = statest.simulate_outcomes(statest.sample_state_uniform(RngStream(seed), 1), plan, RngStream(seed, 1))[0]
    a, b = oracle.estimate(x), oracle.estimate(1 - x)
    assert np.allclose(a, -b, atol=0.03)
    assert np.linalg.norm(a) <= 1 + 1e-12


def test_oracle_cache_uses_counts_only():
    plan = statest.default_plan(2)
    oracle = statest.BayesOracle(plan, 10_000, RngStream(0))
    e1 = oracle.estimate(np.array([1, 0, 0, 0, 1, 1]))
    e2 = oracle.estimate(np.array([0, 1, 0, 0, 1, 1]))
    assert np.array_equal(e1, e2) and len(oracle.cache) == 1
    with pytest.raises(ValueError):
        statest.BayesOracle(plan, 100, RngStream(0))


def test_mse_definition():
    assert statest.mse(np.zeros((4, 3)), statest.sample_state_uniform(RngStream(0), 4)) == pytest.approx(1.0)


def test_small_reconstruction_run():
    cfg = statest.ReconstructConfig(steps=300, test_size=2000, n_mc=20_000, oracle_replicates=2)
    net, summary, log = statest.train_reconstructor(statest.default_plan(4), cfg, seed=0)
    assert summary["zero_baseline_mse"] == pytest.approx(1.0)
    assert summary["oracle_mse"] < summary["test_mse"] < 0.5
    assert log[-1]["step"] == 300
