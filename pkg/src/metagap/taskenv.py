"""Task environments for multi-task linear regression.

A task is a Gaussian linear model ``y = <w*, x> + z`` with ``x ~ N(0, Sigma)``
and ``z ~ N(0, noise_var)``. An environment is a distribution over tasks:
either a finite weighted pool, or the two-component hard/easy mixture whose
hard optima sit around ``R * 1_d`` and easy optima around the origin.
"""

from dataclasses import dataclass, field
import json

import numpy as np

from ._validation import (
    ValidationError,
    as_rng,
    check_count,
    check_positive,
    check_spd,
    check_vector,
)

SCHEMA = "metagap-env/1"


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LinearTask:
    """One regression task.

    ``label`` is an optional tag ("hard" or "easy") used by trainers that
    reweight tasks by hardness.
    """

    weights_star: np.ndarray
    covariance: np.ndarray
    noise_var: float = 0.0
    label: str | None = None

    def __post_init__(self):
        cov = check_spd(self.covariance, "covariance")
        w = check_vector(self.weights_star, "weights_star", dim=cov.shape[0])
        check_positive(self.noise_var, "noise_var", strict=False)
        object.__setattr__(self, "covariance", _frozen(cov))
        object.__setattr__(self, "weights_star", _frozen(w))
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def dim(self):
        return self.weights_star.shape[0]

    def population_loss(self, w):
        """``f(w) = 1/2 (w - w*)^T Sigma (w - w*) + 1/2 noise_var``."""
        diff = np.asarray(w, dtype=float) - self.weights_star
        return 0.5 * diff @ self.covariance @ diff + 0.5 * self.noise_var

    def to_dict(self):
        out = {
            "weights_star": self.weights_star.tolist(),
            "covariance": self.covariance.tolist(),
            "noise_var": self.noise_var,
        }
        if self.label is not None:
            out["label"] = self.label
        return out

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["weights_star"]), np.asarray(doc["covariance"]),
                   doc.get("noise_var", 0.0), doc.get("label"))


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValidationError(
                f"inputs {x.shape} and labels {y.shape} do not describe the same rows")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class EpisodeBatch:
    """Inner (adaptation) rows and outer (evaluation) rows of one episode."""

    inner_inputs: np.ndarray
    inner_labels: np.ndarray
    outer_inputs: np.ndarray
    outer_labels: np.ndarray

    def __post_init__(self):
        inner = Dataset(self.inner_inputs, self.inner_labels)
        outer = Dataset(self.outer_inputs, self.outer_labels)
        if len(inner) < 1 or len(outer) < 1:
            raise ValidationError("episodes need at least one inner and one outer row")
        if inner.inputs.shape[1] != outer.inputs.shape[1]:
            raise ValidationError("inner and outer inputs disagree on dimension")

    @property
    def n_inner(self):
        return self.inner_labels.shape[0]

    @property
    def n_outer(self):
        return self.outer_labels.shape[0]


class TaskEnvironment:
    """Base class for task distributions."""

    kind = None

    def sample_task(self, rng):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @staticmethod
    def from_dict(doc):
        if doc.get("schema") != SCHEMA:
            raise ValidationError(f"unknown environment schema {doc.get('schema')!r}")
        kind = doc.get("kind")
        if kind == FinitePool.kind:
            return FinitePool([LinearTask.from_dict(t) for t in doc["tasks"]],
                              doc["probabilities"])
        if kind == HardEasyMixture.kind:
            m = doc["mixture"]
            if m.get("mix_weight", 0.5) != 0.5:
                raise ValidationError("only mix_weight 0.5 is supported")
            return HardEasyMixture(
                rho_hard=m["rho_hard"], rho_easy=m["rho_easy"],
                center_dist=m["center_dist"], spread_hard=m["spread_hard"],
                spread_easy=m["spread_easy"], dim=m["dim"],
                noise_var=m.get("noise_var", 0.0))
        raise ValidationError(f"unknown environment kind {kind!r}")

    @staticmethod
    def from_json(text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"environment file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError("environment document must be a JSON object")
        try:
            return TaskEnvironment.from_dict(doc)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed environment document: {exc!r}") from exc


class FinitePool(TaskEnvironment):
    """A finite list of tasks drawn with the given probabilities."""

    kind = "FinitePool"

    def __init__(self, tasks, probabilities=None):
        tasks = list(tasks)
        if not tasks:
            raise ValidationError("a pool needs at least one task")
        if probabilities is None:
            probabilities = np.full(len(tasks), 1.0 / len(tasks))
        p = np.asarray(probabilities, dtype=float)
        if p.shape != (len(tasks),) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise ValidationError("pool probabilities must be nonnegative and sum to 1")
        d = tasks[0].dim
        if any(t.dim != d for t in tasks):
            raise ValidationError("all tasks in a pool must share a dimension")
        self.tasks = tuple(tasks)
        self.probabilities = _frozen(p)

    @property
    def dim(self):
        return self.tasks[0].dim

    def __len__(self):
        return len(self.tasks)

    def sample_task(self, rng):
        rng = as_rng(rng)
        return self.tasks[rng.choice(len(self.tasks), p=self.probabilities)]

    def mean_covariance(self):
        return np.einsum("i,ijk->jk", self.probabilities,
                         np.stack([t.covariance for t in self.tasks]))

    def mean_weighted_optimum(self):
        """``E[Sigma_i w_i*]``."""
        return sum(p * t.covariance @ t.weights_star
                   for p, t in zip(self.probabilities, self.tasks))

    def to_dict(self):
        return {"schema": SCHEMA, "kind": self.kind,
                "tasks": [t.to_dict() for t in self.tasks],
                "probabilities": self.probabilities.tolist()}


@dataclass(frozen=True)
class HardEasyMixture(TaskEnvironment):
    """Equal-weight mixture of hard and easy isotropic tasks.

    Hard tasks: ``Sigma = rho_hard I`` and ``w* ~ N(center_dist 1_d, spread_hard I)``.
    Easy tasks: ``Sigma = rho_easy I`` and ``w* ~ N(0, spread_easy I)``.
    """

    rho_hard: float
    rho_easy: float
    center_dist: float
    spread_hard: float
    spread_easy: float
    dim: int
    noise_var: float = 0.0
    mix_weight: float = field(default=0.5, init=False)

    kind = "HardEasyMixture"

    def __post_init__(self):
        check_positive(self.rho_hard, "rho_hard")
        check_positive(self.rho_easy, "rho_easy")
        if self.rho_hard > self.rho_easy:
            raise ValidationError("rho_hard must not exceed rho_easy")
        for name in ("center_dist", "spread_hard", "spread_easy", "noise_var"):
            check_positive(getattr(self, name), name, strict=False)
        check_count(self.dim, "dim")

    def sample_task(self, rng):
        rng = as_rng(rng)
        d = self.dim
        if rng.random() < 0.5:
            w = self.center_dist + np.sqrt(self.spread_hard) * rng.standard_normal(d)
            return LinearTask(w, self.rho_hard * np.eye(d), self.noise_var, "hard")
        w = np.sqrt(self.spread_easy) * rng.standard_normal(d)
        return LinearTask(w, self.rho_easy * np.eye(d), self.noise_var, "easy")

    def mean_covariance(self):
        return 0.5 * (self.rho_hard + self.rho_easy) * np.eye(self.dim)

    def mean_weighted_optimum(self):
        return np.full(self.dim, 0.5 * self.rho_hard * self.center_dist)

    def to_dict(self):
        return {"schema": SCHEMA, "kind": self.kind, "mixture": {
            "rho_hard": self.rho_hard, "rho_easy": self.rho_easy,
            "center_dist": self.center_dist, "spread_hard": self.spread_hard,
            "spread_easy": self.spread_easy, "dim": self.dim,
            "noise_var": self.noise_var, "mix_weight": self.mix_weight}}


def make_two_task_env(rho_hard, rho_easy, w1, w2, noise_var=0.0):
    """Two equally likely tasks with covariances ``rho_hard I`` and ``rho_easy I``."""
    check_positive(rho_hard, "rho_hard")
    check_positive(rho_easy, "rho_easy")
    if rho_hard > rho_easy:
        raise ValidationError("rho_hard must not exceed rho_easy")
    w1 = check_vector(w1, "w1")
    w2 = check_vector(w2, "w2", dim=w1.shape[0])
    d = w1.shape[0]
    return FinitePool([LinearTask(w1, rho_hard * np.eye(d), noise_var, "hard"),
                       LinearTask(w2, rho_easy * np.eye(d), noise_var, "easy")],
                      [0.5, 0.5])


def sample_task(env, rng):
    return env.sample_task(rng)


def sample_dataset(task, count, rng):
    """Draw ``count`` i.i.d. rows ``x ~ N(0, Sigma)`` with ``y = <w*, x> + z``."""
    count = check_count(count, "count")
    rng = as_rng(rng)
    chol = np.linalg.cholesky(task.covariance)
    x = rng.standard_normal((count, task.dim)) @ chol.T
    y = x @ task.weights_star
    if task.noise_var > 0:
        y = y + np.sqrt(task.noise_var) * rng.standard_normal(count)
    return Dataset(x, y)


def split_episodes(data, n_inner, n_outer):
    """Cut ``data`` into consecutive episodes of ``n_inner + n_outer`` rows.

    The first ``n_inner`` rows of each chunk are the inner rows. Row counts
    that are not a multiple of the chunk size are rejected.
    """
    n_inner = check_count(n_inner, "n_inner")
    n_outer = check_count(n_outer, "n_outer")
    chunk = n_inner + n_outer
    n = len(data)
    if n % chunk:
        raise ValidationError(
            f"{n} rows cannot be split into episodes: row count must be a "
            f"multiple of n_inner + n_outer = {chunk}")
    episodes = []
    for start in range(0, n, chunk):
        mid, stop = start + n_inner, start + chunk
        episodes.append(EpisodeBatch(data.inputs[start:mid], data.labels[start:mid],
                                     data.inputs[mid:stop], data.labels[mid:stop]))
    return episodes
