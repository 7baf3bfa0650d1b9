"""Monte-Carlo oracles for post-adaptation risks and fourth-moment identities.

The inner population loss is always evaluated analytically; randomness only
enters through the task draw and the adaptation batch. For a batch of ``m``
rows the adaptation step only depends on the Gram matrix ``S = X^T X`` and on
``X^T z``. When ``m >= d`` both are drawn directly: ``S`` from the Wishart
distribution through the Bartlett decomposition ``S = L A A^T L^T`` and
``X^T z = nu L A g``, which has the same joint law as building ``X`` row by
row. The row sampler is kept for small batches and for cross-checking.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import json
import os

import numpy as np

from ._validation import (
    ValidationError,
    as_rng,
    check_count,
    check_spd,
    check_symmetric,
    check_vector,
)
from .closedform import noise_floor
from .taskenv import FinitePool, HardEasyMixture

CHUNK = 16384
DEFAULT_RISK_TRIALS = 100_000
DEFAULT_MOMENT_TRIALS = 2_000_000


def worker_count():
    """Worker threads for shard evaluation, from ``METAGAP_THREADS`` (default 1)."""
    raw = os.environ.get("METAGAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"METAGAP_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError("METAGAP_THREADS must be at least 1")
    return n


class RunningStats:
    """Streaming mean and variance of scalars or fixed-shape arrays.

    Batches are folded in with the pairwise (Chan et al.) update, so shards
    can be accumulated separately and merged exactly.
    """

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def update(self, batch):
        batch = np.asarray(batch, dtype=float)
        other = RunningStats(self.mean.shape)
        other.count = batch.shape[0]
        if other.count == 0:
            return self
        other.mean = batch.mean(axis=0)
        other.m2 = ((batch - other.mean) ** 2).sum(axis=0)
        return self.merge(other)

    def merge(self, other):
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        self.count = n
        return self

    @property
    def variance(self):
        if self.count < 2:
            return np.full_like(self.mean, np.nan)
        return self.m2 / (self.count - 1)

    @property
    def stderr(self):
        return np.sqrt(self.variance / self.count)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    trials: int

    def __post_init__(self):
        if self.trials < 2:
            raise ValidationError("a Monte-Carlo estimate needs at least two trials")
        if not self.stderr >= 0:
            raise ValidationError("stderr must be nonnegative")

    @classmethod
    def from_stats(cls, stats):
        return cls(float(stats.mean), float(stats.stderr), int(stats.count))

    def to_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "trials": self.trials}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


@dataclass(frozen=True, eq=False)
class FourthMomentReport:
    empirical: np.ndarray
    analytic: np.ndarray
    stderr: np.ndarray
    max_abs_err: float
    trials: int

    @property
    def max_z(self):
        """Largest elementwise error measured in per-element standard errors."""
        err = np.abs(self.empirical - self.analytic)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.stderr > 0, err / self.stderr, np.where(err > 0, np.inf, 0.0))
        return float(z.max())

    def within(self, n_stderr=5.0):
        return self.max_z <= n_stderr

    def to_dict(self):
        return {"empirical": self.empirical.tolist(), "analytic": self.analytic.tolist(),
                "stderr": self.stderr.tolist(), "max_abs_err": self.max_abs_err,
                "max_z": self.max_z, "trials": self.trials}


def _chunks(trials):
    full, rest = divmod(trials, CHUNK)
    return [CHUNK] * full + ([rest] if rest else [])


def _run_sharded(trials, rng, shape, work):
    """Evaluate ``work(count, rng) -> (count, *shape) array`` over fixed chunks.

    Each chunk owns a child stream spawned from ``rng``; the chunk layout
    depends only on ``trials``, so the result does not depend on the number
    of worker threads.
    """
    trials = check_count(trials, "trials", minimum=2)
    sizes = _chunks(trials)
    seeds = np.random.SeedSequence(as_rng(rng).integers(0, 2 ** 63)).spawn(len(sizes))

    def one(args):
        size, seed = args
        return RunningStats(shape).update(work(size, as_rng(seed)))

    jobs = list(zip(sizes, seeds))
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    total = RunningStats(shape)
    for part in parts:
        total.merge(part)
    return total


def wishart_gram(cov, m, count, rng, noise_sd=0.0):
    """Draw ``count`` pairs ``(X^T X, X^T z)`` for ``m`` rows ``x ~ N(0, cov)``.

    Uses the Bartlett decomposition, so it requires ``m >= d``.
    """
    d = cov.shape[0]
    if m < d:
        raise ValidationError(f"the Wishart sampler needs m >= d, got m={m}, d={d}")
    chol = np.linalg.cholesky(cov)
    a = np.zeros((count, d, d))
    rows, cols = np.tril_indices(d, -1)
    a[:, rows, cols] = rng.standard_normal((count, rows.size))
    diag = np.arange(d)
    a[:, diag, diag] = np.sqrt(rng.chisquare(m - diag, size=(count, d)))
    la = chol @ a
    gram = la @ np.swapaxes(la, 1, 2)
    if noise_sd > 0:
        cross = noise_sd * np.einsum("tij,tj->ti", la, rng.standard_normal((count, d)))
    else:
        cross = np.zeros((count, d))
    return gram, cross


def row_gram(cov, m, count, rng, noise_sd=0.0):
    """Same law as ``wishart_gram``, built from explicit ``count x m x d`` rows."""
    d = cov.shape[0]
    chol = np.linalg.cholesky(cov)
    x = rng.standard_normal((count, m, d)) @ chol.T
    gram = np.swapaxes(x, 1, 2) @ x
    if noise_sd > 0:
        z = noise_sd * rng.standard_normal((count, m))
        cross = np.einsum("tmi,tm->ti", x, z)
    else:
        cross = np.zeros((count, d))
    return gram, cross


SAMPLERS = {"wishart": wishart_gram, "rows": row_gram}


def _pick_sampler(sampler, m, d):
    if sampler is None:
        sampler = "wishart" if m >= d else "rows"
    if sampler not in SAMPLERS:
        raise ValidationError(f"unknown sampler {sampler!r}")
    return SAMPLERS[sampler]


def _task_components(env):
    """Covariances, noise levels and a vectorized optimum sampler for ``env``."""
    if isinstance(env, FinitePool):
        covs = [t.covariance for t in env.tasks]
        noises = [t.noise_var for t in env.tasks]
        stars = np.stack([t.weights_star for t in env.tasks])
        p = env.probabilities

        def draw(count, rng):
            idx = rng.choice(len(covs), size=count, p=p) if len(covs) > 1 \
                else np.zeros(count, dtype=int)
            return idx, stars[idx]
        return covs, noises, draw
    if isinstance(env, HardEasyMixture):
        d = env.dim
        covs = [env.rho_hard * np.eye(d), env.rho_easy * np.eye(d)]
        noises = [env.noise_var, env.noise_var]

        def draw(count, rng):
            idx = (rng.random(count) >= 0.5).astype(int)
            spread = np.where(idx == 0, np.sqrt(env.spread_hard), np.sqrt(env.spread_easy))
            center = np.where(idx == 0, env.center_dist, 0.0)
            w = center[:, None] + spread[:, None] * rng.standard_normal((count, d))
            return idx, w
        return covs, noises, draw
    raise ValidationError(f"unsupported environment {type(env).__name__}")


def _component_labels(env):
    if isinstance(env, FinitePool):
        return np.array([t.label == "hard" for t in env.tasks])
    return np.array([True, False])


def sample_task_moments(env, count, row_counts, rng, sampler=None):
    """Draw ``count`` tasks and, per task, independent ``(X^T X, X^T y)`` pairs.

    One pair is produced for each entry of ``row_counts``. Returns the hard-task
    mask, the task optima and a list of ``(grams, xy)`` arrays.
    """
    covs, noises, draw = _task_components(env)
    d = covs[0].shape[0]
    rng = as_rng(rng)
    idx, stars = draw(count, rng)
    hard = _component_labels(env)[idx]
    out = [(np.empty((count, d, d)), np.empty((count, d))) for _ in row_counts]
    for k, cov in enumerate(covs):
        sel = np.flatnonzero(idx == k)
        if sel.size == 0:
            continue
        for (grams, xy), n in zip(out, row_counts):
            gram, cross = _pick_sampler(sampler, n, d)(cov, n, sel.size, rng, np.sqrt(noises[k]))
            grams[sel] = gram
            xy[sel] = np.einsum("tij,tj->ti", gram, stars[sel]) + cross
    return hard, stars, out


def _post_adaptation_losses(env, w, alpha, m, count, rng, sampler):
    covs, noises, draw = _task_components(env)
    d = covs[0].shape[0]
    sample = _pick_sampler(sampler, m, d)
    idx, stars = draw(count, rng)
    out = np.empty(count)
    for k, cov in enumerate(covs):
        sel = np.flatnonzero(idx == k)
        if sel.size == 0:
            continue
        gram, cross = sample(cov, m, sel.size, rng, np.sqrt(noises[k]))
        diff = w - stars[sel]
        # adapted - w* = diff - (alpha/m)(S diff - X^T z)
        moved = diff - (alpha / m) * (np.einsum("tij,tj->ti", gram, diff) - cross)
        out[sel] = 0.5 * np.einsum("ti,ij,tj->t", moved, cov, moved) + 0.5 * noises[k]
    return out


def estimate_fm(env, w, alpha, m, trials=DEFAULT_RISK_TRIALS, rng=None, sampler=None):
    """Monte-Carlo ``F_m(w)``: expected task loss after one adaptation step on ``m`` rows."""
    m = check_count(m, "m")
    w = check_vector(w, "w", dim=env.dim)
    stats = _run_sharded(trials, rng, (), lambda c, r: _post_adaptation_losses(
        env, w, alpha, m, c, r, sampler))
    return McEstimate.from_stats(stats)


def estimate_excess(env, w, alpha, m, trials=DEFAULT_RISK_TRIALS, rng=None, sampler=None):
    """``estimate_fm`` minus the analytic noise floor; the stderr is unchanged."""
    fm = estimate_fm(env, w, alpha, m, trials, rng, sampler)
    return McEstimate(float(fm.mean - noise_floor(env, alpha, m)), fm.stderr, fm.trials)


def fourth_moment_analytic(cov, a_matrix, n):
    """``S A S + (tr(S A) S + S A S) / n``."""
    sa = cov @ a_matrix
    return cov @ a_matrix @ cov + (np.trace(sa) * cov + sa @ cov) / n


def verify_lemma4(cov, a_matrix, n, trials=DEFAULT_MOMENT_TRIALS, rng=None):
    """Compare the empirical mean of ``(X^T X/n) A (X^T X/n)`` with its closed form.

    Rows are drawn explicitly (no Wishart shortcut) so the check does not
    rely on the same sampling identity used by the risk oracles.
    """
    cov = check_spd(cov)
    if np.any(cov != np.diag(np.diag(cov))):
        raise ValidationError("the fourth-moment identity is checked for diagonal covariances only")
    a_matrix = check_symmetric(a_matrix, "a_matrix")
    if a_matrix.shape != cov.shape:
        raise ValidationError("a_matrix and cov must have the same shape")
    n = check_count(n, "n")
    d = cov.shape[0]
    scale = np.sqrt(np.diag(cov))

    def work(count, rng):
        x = rng.standard_normal((count, n, d)) * scale
        s = np.swapaxes(x, 1, 2) @ x / n
        return s @ a_matrix @ s

    stats = _run_sharded(trials, rng, (d, d), work)
    analytic = fourth_moment_analytic(cov, a_matrix, n)
    err = float(np.max(np.abs(stats.mean - analytic)))
    return FourthMomentReport(stats.mean, analytic, stats.stderr, err, stats.count)


def estimate_q_moment(cov, alpha, n_inner, trials=DEFAULT_RISK_TRIALS, rng=None, sampler=None):
    """Empirical mean and stderr of ``P^T S P`` with ``P = I - (alpha/n) X^T X``."""
    cov = check_spd(cov)
    n_inner = check_count(n_inner, "n_inner")
    d = cov.shape[0]
    sample = _pick_sampler(sampler, n_inner, d)

    def work(count, rng):
        gram, _ = sample(cov, n_inner, count, rng)
        p = np.eye(d) - (alpha / n_inner) * gram
        return np.swapaxes(p, 1, 2) @ cov @ p

    stats = _run_sharded(trials, rng, (d, d), work)
    return stats.mean, stats.stderr
