import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from metagap import DivergenceError, SingularMatrixError, ValidationError
from metagap import closedform as cf
from metagap import empirical as emp
from metagap.taskenv import (
    Dataset,
    HardEasyMixture,
    LinearTask,
    make_two_task_env,
    sample_dataset,
    split_episodes,
)


def _two_task_data(noise=0.0, n=40, seed=0):
    env = make_two_task_env(0.3, 1.0, np.array([1.0, 2.0, -1.0]), np.array([-1.0, 0.0, 0.5]),
                            noise)
    rng = np.random.default_rng(seed)
    return env, [sample_dataset(t, n, rng) for t in env.tasks]


def test_nal_exact_recovers_noiseless_weights():
    t = LinearTask(np.array([0.5, -1.5, 2.0]), np.eye(3))
    rep = emp.solve_nal_exact([sample_dataset(t, 10, 0)])
    np.testing.assert_allclose(rep.weights, t.weights_star, atol=1e-8)
    assert rep.method == emp.NAL_EXACT and rep.iterations == 0


def test_nal_exact_satisfies_normal_equations():
    _, data = _two_task_data()
    rep = emp.solve_nal_exact(data)
    g = emp.nal_objective_grad(rep.weights, data)
    y = np.concatenate([d.labels for d in data])
    assert np.linalg.norm(g) < 1e-8 * (1 + np.linalg.norm(y))
    # independent central-difference gradient of the objective
    h = 1e-6
    fd = np.array([(emp.nal_objective(rep.weights + h * e, data)
                    - emp.nal_objective(rep.weights - h * e, data)) / (2 * h)
                   for e in np.eye(3)])
    assert np.linalg.norm(fd) < 1e-6


def test_nal_exact_rank_error():
    ds = sample_dataset(LinearTask(np.zeros(4), np.eye(4)), 3, 0)
    with pytest.raises(ValidationError, match="rank"):
        emp.solve_nal_exact([ds])


def test_nal_exact_singular_gram():
    x = np.ones((5, 2))
    with pytest.raises(SingularMatrixError):
        emp.solve_nal_exact([Dataset(x, np.ones(5))])


def _episodes(data, n2, n1):
    return [split_episodes(d, n2, n1) for d in data]


def test_maml_exact_gradient_vanishes():
    _, data = _two_task_data(noise=0.05)
    eps = _episodes(data, 10, 10)
    rep = emp.solve_maml_exact(eps, 0.4)
    grads = [emp.maml_episode_grad(rep.weights, ep, 0.4) for e in eps for ep in e]
    assert np.linalg.norm(np.mean(grads, axis=0)) < 1e-8 * (1 + np.abs(rep.weights).max())


def test_maml_exact_alpha_zero_is_nal_on_outer_rows():
    _, data = _two_task_data(noise=0.1)
    eps = _episodes(data, 15, 5)
    maml = emp.solve_maml_exact(eps, 0.0).weights
    outer = [Dataset(np.vstack([ep.outer_inputs for ep in e]),
                     np.concatenate([ep.outer_labels for ep in e])) for e in eps]
    np.testing.assert_allclose(maml, emp.solve_nal_exact(outer).weights, atol=1e-10)


def test_maml_exact_one_episode_residual():
    t = LinearTask(np.array([1.0, -1.0, 0.5]), np.eye(3))
    (ep,) = split_episodes(sample_dataset(t, 12, 3), 6, 6)
    w = emp.solve_maml_exact([[ep]], 0.3).weights
    p = np.eye(3) - 0.3 / 6 * ep.inner_inputs.T @ ep.inner_inputs
    assert np.linalg.norm(ep.outer_inputs @ p @ (w - t.weights_star)) < 1e-10


@pytest.mark.parametrize("solver", ["nal", "maml"])
def test_exact_solutions_are_minimizers(solver):
    _, data = _two_task_data(noise=0.1, seed=4)
    rng = np.random.default_rng(5)
    if solver == "nal":
        w = emp.solve_nal_exact(data).weights
        obj = lambda v: emp.nal_objective(v, data)  # noqa: E731
    else:
        eps = _episodes(data, 10, 10)
        w = emp.solve_maml_exact(eps, 0.5).weights
        obj = lambda v: emp.maml_objective(v, eps, 0.5)  # noqa: E731
    base = obj(w)
    for _ in range(50):
        delta = rng.standard_normal(w.size)
        delta *= 1e-3 / np.linalg.norm(delta)
        assert obj(w + delta) >= base - 1e-15


def test_adapt_examples():
    w = np.array([1.0, 2.0])
    t = LinearTask(w, np.eye(2))
    ds = sample_dataset(t, 5, 0)
    np.testing.assert_allclose(emp.adapt(w, ds.inputs, ds.labels, 0.7), w, atol=1e-14)
    np.testing.assert_array_equal(emp.adapt(np.array([3.0, 1.0]), ds.inputs, ds.labels, 0.0),
                                  [3.0, 1.0])
    np.testing.assert_allclose(emp.adapt(np.zeros(2), np.array([[1.0, 0.0]]), np.array([1.0]),
                                         1.0), [1.0, 0.0])


def test_maml_episode_gradient_finite_differences():
    rng = np.random.default_rng(8)
    env = make_two_task_env(0.3, 1.0, np.ones(4), -np.ones(4), 0.05)
    h = 1e-5
    for _ in range(20):
        t = env.sample_task(rng)
        (ep,) = split_episodes(sample_dataset(t, 15, rng), 8, 7)
        w = rng.standard_normal(4)
        alpha = rng.uniform(0, 0.5)
        g = emp.maml_episode_grad(w, ep, alpha)
        fd = np.array([(emp.maml_episode_loss(w + h * e, ep, alpha)
                        - emp.maml_episode_loss(w - h * e, ep, alpha)) / (2 * h)
                       for e in np.eye(4)])
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(g)


def test_sgd_zero_iterations_returns_origin():
    env = make_two_task_env(0.3, 1.0, np.ones(3), -np.ones(3))
    cfg = emp.SgdConfig(0.1, 0.5, 0, 2)
    np.testing.assert_array_equal(emp.sgd_nal(env, cfg, 0).weights, np.zeros(3))
    np.testing.assert_array_equal(emp.sgd_maml(env, cfg, 5, 5, 0).weights, np.zeros(3))


def test_sgd_config_validation():
    with pytest.raises(ValidationError):
        emp.SgdConfig(0.0)
    with pytest.raises(ValidationError):
        emp.SgdConfig(0.1, tasks_per_iter=0)
    with pytest.raises(ValidationError):
        emp.SgdConfig(0.1, hard_weight_zeta=-1.0)


def test_sgd_divergence_guard():
    env = make_two_task_env(1.0, 1.0, np.ones(3), np.ones(3))
    with pytest.raises(DivergenceError):
        emp.sgd_nal(env, emp.SgdConfig(50.0, iterations=200, samples_per_task=20), 0)
    with pytest.raises(DivergenceError):
        emp.sgd_maml(env, emp.SgdConfig(50.0, 0.1, 200), 10, 10, 0)


def test_sgd_nal_converges_to_population_solution():
    env = make_two_task_env(0.5, 1.0, np.ones(3), -np.ones(3))
    cfg = emp.SgdConfig(0.05, 0.0, 3000, 8, 1.0, 50)
    w = np.mean([emp.sgd_nal(env, cfg, s, sampler="wishart").weights for s in range(4)], axis=0)
    assert np.linalg.norm(w - cf.population_nal(env)) < 0.1


def test_sgd_maml_alpha_zero_matches_nal_in_expectation():
    env = make_two_task_env(0.5, 1.0, np.ones(3), -np.ones(3), 0.01)
    nal = np.mean([emp.sgd_nal(env, emp.SgdConfig(0.05, 0.0, 1500, 2, 1.0, 20), s).weights
                   for s in range(4)], axis=0)
    maml = np.mean([emp.sgd_maml(env, emp.SgdConfig(0.05, 0.0, 1500, 2), 10, 10, s).weights
                    for s in range(4)], axis=0)
    np.testing.assert_allclose(nal, maml, atol=0.1)
    np.testing.assert_allclose(maml, cf.population_nal(env), atol=0.1)


def test_samplers_agree_on_sgd_maml():
    env = HardEasyMixture(0.1, 1.0, 2.0, 1.0, 1.0, 5, 0.01)
    cfg = emp.SgdConfig(0.05, 1.0, 1500, 5)
    target = cf.population_maml(env, 1.0, 50)[0]
    for sampler in ("rows", "wishart"):
        w = np.mean([emp.sgd_maml(env, cfg, 50, 20, s, sampler).weights.mean() for s in range(3)])
        assert abs(w - target) < 0.1


def test_zeta_monotonicity():
    env = HardEasyMixture(0.1, 1.0, 2.0, 1.0, 1.0, 10, 0.01)
    coords = []
    for z in (1.0, 2.0, 5.0, 10.0):
        cfg = emp.SgdConfig(0.025, 0.0, 1500, 10, z, 100)
        coords.append(np.mean([emp.sgd_nal(env, cfg, s, "wishart").weights.mean()
                               for s in range(5)]))
    assert all(a <= b for a, b in zip(coords, coords[1:]))


def test_batch_weights_example():
    hard = np.array([True] * 6 + [False] * 4)
    w = emp._batch_weights(hard, 2.0)
    np.testing.assert_allclose(w[:6], 1 / 8)
    np.testing.assert_allclose(w[6:], 1 / 16)
    assert w.sum() == pytest.approx(1.0)


def test_solution_report_json_round_trip():
    rep = emp.SolutionReport(np.array([1.0, 2.0]), emp.MAML_SGD, 10, "abc")
    doc = json.loads(rep.to_json())
    assert doc == {"weights": [1.0, 2.0], "method": "MamlSgd", "iterations": 10,
                   "config_digest": "abc"}
    again = emp.SolutionReport.from_dict(doc)
    np.testing.assert_array_equal(again.weights, rep.weights)


def test_solution_report_rejects_nonfinite_and_negative_iterations():
    with pytest.raises(ValidationError):
        emp.SolutionReport(np.array([np.inf]), emp.NAL_SGD)
    with pytest.raises(ValidationError):
        emp.SolutionReport(np.zeros(2), emp.NAL_SGD, -1)


def test_config_digest_is_stable():
    a = emp.config_digest({"b": 1, "a": [1, 2]})
    assert a == emp.config_digest({"a": [1, 2], "b": 1})
    assert len(a) == 16


def _stacked(data):
    x = np.vstack([d.inputs for d in data])
    y = np.concatenate([d.labels for d in data])
    g = np.concatenate([np.full(len(d), i) for i, d in enumerate(data)])
    return x, y, g


def test_regressors_match_solvers():
    _, data = _two_task_data(noise=0.05)
    x, y, g = _stacked(data)
    nal = emp.NALRegressor().fit(x, y, groups=g)
    np.testing.assert_allclose(nal.coef_, emp.solve_nal_exact(data).weights)
    maml = emp.MAMLRegressor(alpha=0.4, n_inner=10, n_outer=10).fit(x, y, groups=g)
    np.testing.assert_allclose(maml.coef_, emp.solve_maml_exact(_episodes(data, 10, 10),
                                                                0.4).weights)
    np.testing.assert_allclose(maml.predict(x[:3]), x[:3] @ maml.coef_)
    adapted = maml.adapt(x[:5], y[:5])
    np.testing.assert_allclose(adapted, emp.adapt(maml.coef_, x[:5], y[:5], 0.4))
    assert isinstance(nal.score(x, y), float)


def test_regressor_params_and_clone():
    est = emp.MAMLRegressor(alpha=0.2, n_inner=3, n_outer=4)
    assert est.get_params() == {"alpha": 0.2, "n_inner": 3, "n_outer": 4}
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 2)))
