import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metagap import ValidationError
from metagap.taskenv import (
    SCHEMA,
    Dataset,
    FinitePool,
    HardEasyMixture,
    LinearTask,
    TaskEnvironment,
    make_two_task_env,
    sample_dataset,
    sample_task,
    split_episodes,
)


def test_linear_task_rejects_asymmetric_covariance():
    with pytest.raises(ValidationError):
        LinearTask(np.zeros(2), np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_linear_task_rejects_indefinite_covariance():
    with pytest.raises(ValidationError):
        LinearTask(np.zeros(2), np.diag([1.0, -1.0]))


def test_linear_task_rejects_length_mismatch_and_nonfinite():
    with pytest.raises(ValidationError):
        LinearTask(np.zeros(3), np.eye(2))
    with pytest.raises(ValidationError):
        LinearTask(np.array([np.nan, 0.0]), np.eye(2))


def test_pool_probabilities_validated():
    t = LinearTask(np.zeros(2), np.eye(2))
    with pytest.raises(ValidationError):
        FinitePool([t, t], [0.6, 0.6])
    with pytest.raises(ValidationError):
        FinitePool([t, t], [1.5, -0.5])


@pytest.mark.parametrize("kwargs", [
    dict(rho_hard=0.0, rho_easy=1.0),
    dict(rho_hard=2.0, rho_easy=1.0),
    dict(rho_hard=0.1, rho_easy=1.0, center_dist=-1.0),
    dict(rho_hard=0.1, rho_easy=1.0, spread_hard=-0.1),
    dict(rho_hard=0.1, rho_easy=1.0, dim=0),
])
def test_mixture_parameter_checks(kwargs):
    base = dict(rho_hard=0.1, rho_easy=0.9, center_dist=1.0, spread_hard=0.1,
                spread_easy=1.0, dim=3)
    with pytest.raises(ValidationError):
        HardEasyMixture(**{**base, **kwargs})


def test_two_task_env_matches_hardness_setup():
    d = 10
    env = make_two_task_env(0.1, 1.0, np.ones(d), -np.ones(d), 0.01)
    assert len(env) == 2
    np.testing.assert_array_equal(env.probabilities, [0.5, 0.5])
    np.testing.assert_array_equal(env.tasks[0].covariance, 0.1 * np.eye(d))
    np.testing.assert_array_equal(env.tasks[1].covariance, np.eye(d))
    assert env.tasks[0].noise_var == 0.01
    assert env.tasks[0].label == "hard"


def test_two_task_env_errors():
    with pytest.raises(ValidationError):
        make_two_task_env(0.1, 1.0, np.ones(3), np.ones(4))
    with pytest.raises(ValidationError):
        make_two_task_env(-0.1, 1.0, np.ones(3), np.ones(3))
    with pytest.raises(ValidationError):
        make_two_task_env(1.0, 0.5, np.ones(3), np.ones(3))


def test_zero_spread_mixture_returns_centres():
    env = HardEasyMixture(0.1, 0.9, 2.0, 0.0, 0.0, 4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = sample_task(env, rng)
        expected = 2.0 if t.label == "hard" else 0.0
        np.testing.assert_array_equal(t.weights_star, np.full(4, expected))


def test_single_task_pool_always_returns_it():
    t = LinearTask(np.ones(2), np.eye(2))
    pool = FinitePool([t])
    rng = np.random.default_rng(1)
    assert all(pool.sample_task(rng) is t for _ in range(10))


def test_mixture_hard_fraction():
    env = HardEasyMixture(0.1, 0.9, 1.0, 0.5, 0.5, 10)
    rng = np.random.default_rng(2)
    hard = sum(env.sample_task(rng).label == "hard" for _ in range(100_000))
    assert abs(hard / 100_000 - 0.5) < 0.01


def test_mixture_moments_match_analytic():
    env = HardEasyMixture(0.1, 0.9, 2.0, 0.3, 0.7, 3)
    rng = np.random.default_rng(3)
    draws = [env.sample_task(rng) for _ in range(100_000)]
    sw = np.array([t.covariance @ t.weights_star for t in draws])
    sig = np.array([t.covariance[0, 0] for t in draws])
    se_sw = sw.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(sw.mean(axis=0) - env.mean_weighted_optimum()) < 3 * se_sw)
    np.testing.assert_allclose(env.mean_weighted_optimum(), 0.5 * 0.1 * 2.0 * np.ones(3))
    assert abs(sig.mean() - env.mean_covariance()[0, 0]) < 3 * sig.std(ddof=1) / np.sqrt(len(sig))
    np.testing.assert_allclose(env.mean_covariance(), 0.5 * np.eye(3))


def test_noiseless_labels_are_exact():
    t = LinearTask(np.array([1.0, -2.0, 0.5]), np.diag([1.0, 2.0, 3.0]))
    ds = sample_dataset(t, 50, 0)
    assert np.linalg.norm(ds.labels - ds.inputs @ t.weights_star) < 1e-10


def test_sample_covariance_converges():
    d = 5
    ds = sample_dataset(LinearTask(np.zeros(d), np.eye(d)), 100_000, 4)
    emp_cov = ds.inputs.T @ ds.inputs / len(ds)
    assert np.linalg.norm(emp_cov - np.eye(d)) < 0.05 * d


def test_single_row_dataset():
    ds = sample_dataset(LinearTask(np.zeros(3), np.eye(3)), 1, 5)
    assert ds.inputs.shape == (1, 3) and ds.labels.shape == (1,)


def test_sample_dataset_is_reproducible():
    t = LinearTask(np.ones(3), np.eye(3), 0.1)
    a, b = sample_dataset(t, 20, 11), sample_dataset(t, 20, 11)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_dataset_shape_mismatch():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), np.zeros(4))


@pytest.mark.parametrize("n,n2,n1,count", [(100, 25, 25, 2), (30, 20, 10, 1)])
def test_split_counts(n, n2, n1, count):
    ds = sample_dataset(LinearTask(np.zeros(2), np.eye(2)), n, 0)
    eps = split_episodes(ds, n2, n1)
    assert len(eps) == count
    assert all(e.n_inner == n2 and e.n_outer == n1 for e in eps)


def test_split_rejects_indivisible():
    ds = sample_dataset(LinearTask(np.zeros(2), np.eye(2)), 31, 0)
    with pytest.raises(ValidationError, match="30"):
        split_episodes(ds, 20, 10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_split_is_partition(n2, n1, tau):
    n = tau * (n1 + n2)
    x = np.arange(n * 2, dtype=float).reshape(n, 2)
    ds = Dataset(x, np.arange(n, dtype=float))
    eps = split_episodes(ds, n2, n1)
    rebuilt = np.concatenate([np.concatenate([e.inner_labels, e.outer_labels]) for e in eps])
    np.testing.assert_array_equal(rebuilt, ds.labels)
    stacked = np.concatenate([np.vstack([e.inner_inputs, e.outer_inputs]) for e in eps])
    np.testing.assert_array_equal(stacked, x)


def test_environment_json_round_trip():
    pool = make_two_task_env(0.2, 1.0, np.ones(3), -np.ones(3), 0.05)
    again = TaskEnvironment.from_json(pool.to_json())
    assert again.to_dict() == pool.to_dict()
    mix = HardEasyMixture(0.1, 0.9, 2.0, 0.1, 1.0, 10, 0.01)
    again = TaskEnvironment.from_json(mix.to_json())
    assert again == mix
    assert json.loads(mix.to_json())["schema"] == SCHEMA


@pytest.mark.parametrize("text", [
    "not json",
    "[]",
    json.dumps({"schema": "other/9", "kind": "FinitePool"}),
    json.dumps({"schema": SCHEMA, "kind": "Unknown"}),
    json.dumps({"schema": SCHEMA, "kind": "FinitePool"}),
    json.dumps({"schema": SCHEMA, "kind": "HardEasyMixture", "mixture": {"rho_hard": 1}}),
])
def test_environment_json_rejects_malformed(text):
    with pytest.raises(ValidationError):
        TaskEnvironment.from_json(text)
