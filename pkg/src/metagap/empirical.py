"""Empirical NAL and MAML solutions: exact least-squares solves and SGD trainers.

All per-sample losses use the mean-squared form ``1/(2n) ||X w - y||^2`` so the
inner step size ``alpha`` means the same thing for every batch size.
"""

from dataclasses import asdict, dataclass
import hashlib
import json

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import (
    DivergenceError,
    ValidationError,
    as_rng,
    check_count,
    check_positive,
    check_vector,
    spd_solve,
)
from .montecarlo import sample_task_moments
from .taskenv import Dataset, split_episodes

NAL_EXACT = "NalExact"
MAML_EXACT = "MamlExact"
NAL_SGD = "NalSgd"
MAML_SGD = "MamlSgd"

DIVERGENCE_NORM = 1e6


def config_digest(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class SolutionReport:
    weights: np.ndarray
    method: str
    iterations: int = 0
    config_digest: str = ""

    def __post_init__(self):
        check_vector(self.weights, "weights")
        if self.iterations < 0:
            raise ValidationError("iterations must be nonnegative")

    def to_dict(self):
        return {"weights": np.asarray(self.weights).tolist(), "method": self.method,
                "iterations": int(self.iterations), "config_digest": self.config_digest}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["weights"], dtype=float), doc["method"],
                   int(doc.get("iterations", 0)), doc.get("config_digest", ""))


@dataclass(frozen=True)
class SgdConfig:
    """Outer-loop settings shared by the SGD trainers.

    ``samples_per_task`` is the number of rows drawn per sampled task for NAL.
    ``hard_weight_zeta`` is the weight ratio of hard to easy tasks inside each
    task batch; 1 recovers the plain average.
    """

    meta_lr: float
    inner_lr: float = 0.0
    iterations: int = 1000
    tasks_per_iter: int = 1
    hard_weight_zeta: float = 1.0
    samples_per_task: int = 50

    def __post_init__(self):
        check_positive(self.meta_lr, "meta_lr")
        check_positive(self.inner_lr, "inner_lr", strict=False)
        check_count(self.iterations, "iterations", minimum=0)
        check_count(self.tasks_per_iter, "tasks_per_iter")
        check_positive(self.hard_weight_zeta, "hard_weight_zeta")
        check_count(self.samples_per_task, "samples_per_task")


def _stack(datasets):
    datasets = list(datasets)
    if not datasets:
        raise ValidationError("need at least one dataset")
    d = datasets[0].inputs.shape[1]
    if any(ds.inputs.shape[1] != d for ds in datasets):
        raise ValidationError("datasets disagree on input dimension")
    return datasets, d


def nal_objective(w, datasets):
    """Pooled training loss ``sum_i ||X_i w - y_i||^2 / (2 sum_i n_i)``."""
    total = sum(np.sum((ds.inputs @ w - ds.labels) ** 2) for ds in datasets)
    return 0.5 * total / sum(len(ds) for ds in datasets)


def nal_objective_grad(w, datasets):
    n = sum(len(ds) for ds in datasets)
    return sum(ds.inputs.T @ (ds.inputs @ w - ds.labels) for ds in datasets) / n


def solve_nal_exact(datasets):
    """``(sum X_i^T X_i)^-1 sum X_i^T y_i``."""
    datasets, d = _stack(datasets)
    rows = sum(len(ds) for ds in datasets)
    if rows < d:
        raise ValidationError(
            f"pooled Gram matrix has rank at most {rows} < dimension {d}")
    gram = sum(ds.inputs.T @ ds.inputs for ds in datasets)
    rhs = sum(ds.inputs.T @ ds.labels for ds in datasets)
    w = spd_solve(gram, rhs, "pooled Gram matrix")
    return SolutionReport(w, NAL_EXACT, 0, config_digest({"tasks": len(datasets), "rows": rows}))


def adapt(weights, inputs, labels, alpha):
    """One gradient step on ``1/(2m) ||X w - y||^2``: ``w - (alpha/m) X^T (X w - y)``."""
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(labels, dtype=float)
    if x.ndim != 2 or y.shape != (x.shape[0],) or x.shape[0] < 1:
        raise ValidationError("adaptation batch needs an m x d input matrix and m labels")
    w = np.asarray(weights, dtype=float)
    return w - (alpha / x.shape[0]) * (x.T @ (x @ w - y))


def _episode_system(ep, alpha):
    """Affine map ``w -> A w - b`` whose squared norm / (2 n_out) is the episode loss."""
    xin, yin = ep.inner_inputs, ep.inner_labels
    xout = ep.outer_inputs
    d = xin.shape[1]
    precond = np.eye(d) - (alpha / ep.n_inner) * (xin.T @ xin)
    shift = (alpha / ep.n_inner) * (xin.T @ yin)
    return xout @ precond, ep.outer_labels - xout @ shift


def maml_episode_loss(w, episode, alpha):
    """Outer loss after one inner step on the episode's inner rows."""
    adapted = adapt(w, episode.inner_inputs, episode.inner_labels, alpha)
    resid = episode.outer_inputs @ adapted - episode.outer_labels
    return 0.5 * np.mean(resid ** 2)


def maml_episode_grad(w, episode, alpha):
    """Exact gradient of ``maml_episode_loss``, second-order factor included."""
    xin = episode.inner_inputs
    adapted = adapt(w, xin, episode.inner_labels, alpha)
    outer_grad = episode.outer_inputs.T @ (episode.outer_inputs @ adapted
                                           - episode.outer_labels) / episode.n_outer
    # P = I - (alpha/n2) Xin^T Xin is symmetric
    return outer_grad - (alpha / episode.n_inner) * (xin.T @ (xin @ outer_grad))


def maml_objective(w, episodes_per_task, alpha):
    losses = [maml_episode_loss(w, ep, alpha) for eps in episodes_per_task for ep in eps]
    return float(np.mean(losses))


def solve_maml_exact(episodes_per_task, alpha):
    """Minimize the average one-step MAML loss over all episodes of all tasks.

    The loss is quadratic in ``w``, so the minimizer solves the normal
    equations ``sum Q_hat w = sum A^T b`` with ``Q_hat = P Xout^T Xout P / n_out``.
    """
    episodes = [ep for eps in episodes_per_task for ep in eps]
    if not episodes:
        raise ValidationError("need at least one episode")
    d = episodes[0].inner_inputs.shape[1]
    lhs = np.zeros((d, d))
    rhs = np.zeros(d)
    for ep in episodes:
        a, b = _episode_system(ep, alpha)
        lhs += a.T @ a / ep.n_outer
        rhs += a.T @ b / ep.n_outer
    w = spd_solve(lhs, rhs, "accumulated MAML matrix")
    digest = config_digest({"episodes": len(episodes), "alpha": alpha})
    return SolutionReport(w, MAML_EXACT, 0, digest)


def _batch_weights(hard, zeta):
    h = hard.sum()
    e = hard.size - h
    return np.where(hard, zeta, 1.0) / (h * zeta + e)


def _guard(w, it):
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise DivergenceError(f"iterate norm {norm:.3e} exceeded {DIVERGENCE_NORM:g} "
                              f"at iteration {it}")


def sgd_nal(env, cfg, rng, sampler="rows"):
    """Stochastic gradient descent on the (optionally hardness-weighted) NAL loss.

    Each iteration draws ``cfg.tasks_per_iter`` fresh tasks and
    ``cfg.samples_per_task`` rows for each of them. The per-task gradient only
    needs ``X^T X`` and ``X^T y``; ``sampler="wishart"`` draws those directly
    instead of building the rows.
    """
    rng = as_rng(rng)
    n = cfg.samples_per_task
    w = np.zeros(env.dim)
    for it in range(cfg.iterations):
        hard, _, [(gram, xy)] = sample_task_moments(env, cfg.tasks_per_iter, (n,), rng, sampler)
        c = _batch_weights(hard, cfg.hard_weight_zeta)
        w = w - cfg.meta_lr * (c @ (gram @ w - xy)) / n
        _guard(w, it)
    return SolutionReport(w, NAL_SGD, cfg.iterations, config_digest(asdict(cfg)))


def sgd_maml(env, cfg, n_inner, n_outer, rng, sampler="rows"):
    """Stochastic gradient descent on the one-step MAML loss, one episode per task."""
    n_inner = check_count(n_inner, "n_inner")
    n_outer = check_count(n_outer, "n_outer")
    rng = as_rng(rng)
    alpha = cfg.inner_lr
    w = np.zeros(env.dim)
    for it in range(cfg.iterations):
        hard, _, [(g_in, c_in), (g_out, c_out)] = sample_task_moments(
            env, cfg.tasks_per_iter, (n_inner, n_outer), rng, sampler)
        c = _batch_weights(hard, cfg.hard_weight_zeta)
        adapted = w - (alpha / n_inner) * (g_in @ w - c_in)
        outer = np.einsum("tij,tj->ti", g_out, adapted) - c_out
        grads = outer / n_outer - (alpha / (n_inner * n_outer)) * np.einsum(
            "tij,tj->ti", g_in, outer)
        w = w - cfg.meta_lr * (c @ grads)
        _guard(w, it)
    digest = config_digest({**asdict(cfg), "n_inner": n_inner, "n_outer": n_outer})
    return SolutionReport(w, MAML_SGD, cfg.iterations, digest)


def _group_datasets(X, y, groups):
    X, y = check_X_y(X, y, y_numeric=True)
    if groups is None:
        groups = np.zeros(len(y), dtype=int)
    groups = np.asarray(groups)
    if groups.shape != y.shape:
        raise ValidationError("groups must give one task id per row")
    return [Dataset(X[groups == g], y[groups == g]) for g in np.unique(groups)], X.shape[1]


class _InitializationRegressor(RegressorMixin, BaseEstimator):
    """Shared predict/adapt for estimators that learn an initialization ``coef_``."""

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_

    def adapt(self, X, y, alpha=None):
        """Coefficients after one SGD step on ``(X, y)`` from ``coef_``."""
        check_is_fitted(self, "coef_")
        X, y = check_X_y(X, y, y_numeric=True)
        step = getattr(self, "alpha", 0.0) if alpha is None else alpha
        return adapt(self.coef_, X, y, step)


class NALRegressor(_InitializationRegressor):
    """Pooled least squares across tasks; ``groups`` gives the task of each row."""

    def fit(self, X, y, groups=None):
        datasets, self.n_features_in_ = _group_datasets(X, y, groups)
        self.report_ = solve_nal_exact(datasets)
        self.coef_ = self.report_.weights
        return self

    def adapt(self, X, y, alpha=0.0):
        return super().adapt(X, y, alpha)


class MAMLRegressor(_InitializationRegressor):
    """Exact minimizer of the one-step MAML training loss.

    Rows of each task (in order) are cut into episodes of ``n_inner`` inner
    and ``n_outer`` outer rows.
    """

    def __init__(self, alpha=0.1, n_inner=10, n_outer=10):
        self.alpha = alpha
        self.n_inner = n_inner
        self.n_outer = n_outer

    def fit(self, X, y, groups=None):
        datasets, self.n_features_in_ = _group_datasets(X, y, groups)
        episodes = [split_episodes(ds, self.n_inner, self.n_outer) for ds in datasets]
        self.report_ = solve_maml_exact(episodes, self.alpha)
        self.coef_ = self.report_.weights
        return self
