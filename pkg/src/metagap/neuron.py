"""Sum-of-neurons regression with a fixed second layer.

Model: ``h_W(x) = c * sum_k sigma(<w_k, x>)`` with ``W`` a ``d x M`` matrix
whose columns are neurons and ``c = output_scale``. A task draws
``x ~ N(0, input_var * I)`` and labels ``y = h_{W*}(x)``.

Population expectations are replaced by sample averages over a fixed set of
standard-normal draws. Passing an integer seed reuses the same draws on every
call (common random numbers), which makes every objective below a smooth,
deterministic function of ``W``.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import json

import numpy as np
from scipy.special import expit

from ._validation import ValidationError, as_rng, check_count, check_positive

NAL = "NAL"
MAML = "MAML"
DEFAULT_SAMPLES = 200_000
HESSIAN_BUDGET = 64


def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_d1(u):
    return expit(u)


def _softplus_d2(u):
    s = expit(u)
    return s * (1 - s)


def _sigmoid_d2(u):
    s = expit(u)
    return s * (1 - s) * (1 - 2 * s)


def _tanh_d1(u):
    return 1 - np.tanh(u) ** 2


def _tanh_d2(u):
    t = np.tanh(u)
    return -2 * t * (1 - t ** 2)


# value, first derivative, second derivative
ACTIVATIONS = {
    "softplus": (_softplus, _softplus_d1, _softplus_d2),
    "sigmoid": (expit, _softplus_d2, _sigmoid_d2),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
    "relu": (lambda u: np.maximum(u, 0.0), lambda u: (u > 0).astype(float),
             lambda u: np.zeros_like(u)),
}


@dataclass(frozen=True, eq=False)
class NeuronTask:
    """Ground-truth neurons (columns of ``weights_star``) plus input scaling."""

    weights_star: np.ndarray
    activation: str = "softplus"
    input_var: float = 1.0
    output_scale: float = 1.0
    label: str | None = None

    def __post_init__(self):
        w = np.array(self.weights_star, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if w.ndim != 2 or w.shape[1] < 1 or not np.all(np.isfinite(w)):
            raise ValidationError("weights_star must be a finite d x M matrix with M >= 1")
        act = self.activation.lower()
        if act not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        check_positive(self.input_var, "input_var")
        check_positive(self.output_scale, "output_scale")
        w.setflags(write=False)
        object.__setattr__(self, "weights_star", w)
        object.__setattr__(self, "activation", act)

    @property
    def shape(self):
        return self.weights_star.shape

    def to_dict(self):
        return {"weights_star": self.weights_star.tolist(), "activation": self.activation,
                "input_var": self.input_var, "output_scale": self.output_scale,
                "label": self.label}


@dataclass(frozen=True)
class HessianBounds:
    beta_hat: float
    lip_hat: float
    asymmetry: float = 0.0

    def __post_init__(self):
        if self.beta_hat > self.lip_hat:
            raise ValidationError("beta_hat cannot exceed lip_hat")


@dataclass(frozen=True, eq=False)
class StationaryReport:
    point: np.ndarray
    grad_norms: tuple
    objective: str
    alpha: float
    converged: bool
    residual: float
    tol: float
    iterations: int = 0

    def __post_init__(self):
        if self.residual < 0:
            raise ValidationError("residual must be nonnegative")

    def to_dict(self):
        return {"point": np.asarray(self.point).tolist(),
                "grad_norms": [float(g) for g in self.grad_norms],
                "objective": self.objective, "alpha": self.alpha,
                "converged": bool(self.converged), "residual": self.residual,
                "tol": self.tol, "iterations": self.iterations}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


@dataclass(frozen=True)
class RatioCheck:
    lhs: float
    rhs: float
    slack_budget: float
    holds: bool
    factor_product: float
    factor_squared: float
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "slack_budget": self.slack_budget,
                "holds": bool(self.holds), "factor_product": self.factor_product,
                "factor_squared": self.factor_squared, **self.extras}


@lru_cache(maxsize=16)
def _cached_draws(seed, n, d):
    z = as_rng(seed).standard_normal((n, d))
    z.setflags(write=False)
    return z


def _draws(rng, n, d):
    n = check_count(n, "n_samples")
    if isinstance(rng, (int, np.integer)) and not isinstance(rng, bool):
        return _cached_draws(int(rng), n, d)
    return as_rng(rng).standard_normal((n, d))


def _as_weights(task, w):
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape != task.shape:
        raise ValidationError(f"weights have shape {w.shape}, expected {task.shape}")
    return w


class _Batch:
    """Task quantities on one fixed sample, shared by the loss, gradient and HVP."""

    def __init__(self, task, z):
        self.task = task
        self.x = np.sqrt(task.input_var) * z
        self.f, self.d1, self.d2 = ACTIVATIONS[task.activation]
        self.c = task.output_scale
        self.y = self.c * self.f(self.x @ task.weights_star).sum(axis=1)

    def residual(self, w):
        u = self.x @ w
        return u, self.c * self.f(u).sum(axis=1) - self.y

    def loss(self, w):
        return 0.5 * np.mean(self.residual(w)[1] ** 2)

    def grad(self, w):
        u, r = self.residual(w)
        return self.c * self.x.T @ (r[:, None] * self.d1(u)) / len(r)

    def hvp(self, w, v):
        u, r = self.residual(w)
        s1 = self.d1(u)
        xv = self.x @ v
        dr = self.c * np.sum(s1 * xv, axis=1)
        inner = dr[:, None] * s1 + r[:, None] * self.d2(u) * xv
        return self.c * self.x.T @ inner / len(r)

    def maml_loss(self, w, alpha):
        return self.loss(w - alpha * self.grad(w))

    def maml_grad(self, w, alpha):
        g_out = self.grad(w - alpha * self.grad(w))
        return g_out - alpha * self.hvp(w, g_out)


def _batches(tasks, n_samples, rng):
    tasks = list(tasks)
    if not tasks:
        raise ValidationError("need at least one task")
    shape = tasks[0].shape
    if any(t.shape != shape for t in tasks):
        raise ValidationError("all tasks must share the weight shape")
    z = _draws(rng, n_samples, shape[0])
    return [_Batch(t, z) for t in tasks]


def neuron_loss(task, w, n_samples=DEFAULT_SAMPLES, rng=0):
    """Sample-average ``1/2 E[(h_W(x) - y)^2]``."""
    (b,) = _batches([task], n_samples, rng)
    return float(b.loss(_as_weights(task, w)))


def neuron_grad(task, w, n_samples=DEFAULT_SAMPLES, rng=0):
    (b,) = _batches([task], n_samples, rng)
    return b.grad(_as_weights(task, w))


def neuron_hvp(task, w, v, n_samples=DEFAULT_SAMPLES, rng=0):
    """Hessian of ``neuron_loss`` at ``w`` applied to the direction ``v``."""
    (b,) = _batches([task], n_samples, rng)
    return b.hvp(_as_weights(task, w), _as_weights(task, v))


def nal_objective(tasks, w, n_samples=DEFAULT_SAMPLES, rng=0):
    bs = _batches(tasks, n_samples, rng)
    w = _as_weights(bs[0].task, w)
    return float(np.mean([b.loss(w) for b in bs]))


def maml_full_step_objective(tasks, w, alpha, n_samples=DEFAULT_SAMPLES, rng=0):
    """Mean over tasks of ``f_i(W - alpha grad f_i(W))``."""
    check_positive(alpha, "alpha", strict=False)
    bs = _batches(tasks, n_samples, rng)
    w = _as_weights(bs[0].task, w)
    return float(np.mean([b.maml_loss(w, alpha) for b in bs]))


def maml_full_step_grad(tasks, w, alpha, n_samples=DEFAULT_SAMPLES, rng=0):
    """Mean over tasks of ``(I - alpha H_i(W)) grad f_i(W - alpha grad f_i(W))``."""
    check_positive(alpha, "alpha", strict=False)
    bs = _batches(tasks, n_samples, rng)
    w = _as_weights(bs[0].task, w)
    return np.mean([b.maml_grad(w, alpha) for b in bs], axis=0)


def _descend(fun, grad, w0, tol, max_iters):
    """Gradient descent with a Barzilai-Borwein trial step and Armijo backtracking."""
    w = w0
    f, g = fun(w), grad(w)
    step = 1.0
    for it in range(max_iters):
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            return w, gnorm, it
        while True:
            cand = w - step * g
            fc = fun(cand)
            if fc <= f - 1e-4 * step * gnorm ** 2 or step < 1e-14:
                break
            step *= 0.5
        gc = grad(cand)
        s, yk = (cand - w).ravel(), (gc - g).ravel()
        sy = s @ yk
        step = (s @ s) / sy if sy > 0 else 2.0 * step
        w, f, g = cand, fc, gc
    return w, np.linalg.norm(g), max_iters


def find_stationary(tasks, objective_kind, alpha, w0, tol=1e-6, max_iters=5000,
                    n_samples=DEFAULT_SAMPLES, rng=0):
    """Locate a stationary point of the NAL or full-step MAML sample objective.

    Non-convergence within ``max_iters`` is reported through ``converged``.
    """
    check_positive(tol, "tol")
    check_positive(alpha, "alpha", strict=False)
    max_iters = check_count(max_iters, "max_iters", minimum=0)
    bs = _batches(tasks, n_samples, rng)
    w0 = _as_weights(bs[0].task, w0).copy()
    if objective_kind == NAL:
        def fun(w):
            return np.mean([b.loss(w) for b in bs])

        def grad(w):
            return np.mean([b.grad(w) for b in bs], axis=0)
    elif objective_kind == MAML:
        def fun(w):
            return np.mean([b.maml_loss(w, alpha) for b in bs])

        def grad(w):
            return np.mean([b.maml_grad(w, alpha) for b in bs], axis=0)
    else:
        raise ValidationError(f"objective_kind must be {NAL!r} or {MAML!r}")
    w, residual, iters = _descend(fun, grad, w0, tol, max_iters)
    norms = tuple(float(np.linalg.norm(b.grad(w))) for b in bs)
    return StationaryReport(w, norms, objective_kind, float(alpha),
                            bool(residual < tol), float(residual), float(tol), iters)


def estimate_hessian_bounds(task, w, n_samples=DEFAULT_SAMPLES, rng=0, step=1e-4):
    """Extreme eigenvalues of a central-difference Hessian of ``neuron_loss``."""
    w = _as_weights(task, w)
    dim = w.size
    if dim > HESSIAN_BUDGET:
        raise ValidationError(f"Hessian of size {dim} exceeds the budget of {HESSIAN_BUDGET}")
    (b,) = _batches([task], n_samples, rng)
    cols = []
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = step
        e = e.reshape(w.shape)
        cols.append(((b.grad(w + e) - b.grad(w - e)) / (2 * step)).ravel())
    h = np.column_stack(cols)
    scale = max(np.abs(h).max(), np.finfo(float).tiny)
    asym = float(np.abs(h - h.T).max() / scale)
    evals = np.linalg.eigvalsh(0.5 * (h + h.T))
    return HessianBounds(float(evals[0]), float(evals[-1]), asym)


def check_gradient_ratio(report, bounds_hard, bounds_easy, alpha, hard=0, easy=1):
    """Test ``||grad f_hard|| <= factor * ||grad f_easy|| + C alpha^2`` at a stationary point.

    Two versions of the contraction factor circulate,
    ``(1 - 2 a b2) / (1 - a L1)^2`` and ``((1 - a b2) / (1 - a L1))^2``; the
    check uses the larger (looser) one and reports both. ``C`` is
    ``10 * max(L)^2 * max ||grad f_i||``.
    """
    lips = (bounds_hard.lip_hat, bounds_easy.lip_hat)
    top = max(lips)
    if alpha < 0 or (top > 0 and alpha > 1.0 / top):
        raise ValidationError(f"alpha={alpha} outside [0, 1/L_max] with L_max={top:.4g}")
    b2, l1 = bounds_easy.beta_hat, bounds_hard.lip_hat
    denom = 1 - alpha * l1
    if denom <= 0:
        raise ValidationError("alpha * L_hard must be below 1")
    f_prod = (1 - 2 * alpha * b2) / denom ** 2
    f_sq = ((1 - alpha * b2) / denom) ** 2
    factor = max(f_prod, f_sq)
    g_hard, g_easy = report.grad_norms[hard], report.grad_norms[easy]
    rhs = factor * g_easy
    slack = 10 * top ** 2 * max(report.grad_norms) * alpha ** 2
    # tiny absolute margin so exact ties survive round-off
    holds = g_hard <= rhs + slack + 1e-12 * max(1.0, g_easy)
    return RatioCheck(float(g_hard), float(rhs), float(slack), bool(holds),
                      float(f_prod), float(f_sq))


@dataclass(frozen=True, eq=False)
class LandscapeGrid:
    """Objective values on a square grid over one 2-D neuron.

    ``values[i, j]`` is the objective at ``w = (axis[j], axis[i])``: rows
    follow the second coordinate, columns the first.
    """

    axis: np.ndarray
    values: np.ndarray
    objective: str
    alpha: float
    seed: object
    n_samples: int

    def argmin_point(self):
        i, j = np.unravel_index(np.argmin(self.values), self.values.shape)
        return np.array([self.axis[j], self.axis[i]])

    def metadata(self):
        return {"objective": self.objective, "alpha": self.alpha,
                "seed": self.seed if isinstance(self.seed, (int, type(None))) else str(self.seed),
                "n_samples": self.n_samples,
                "axis": {"min": float(self.axis[0]), "max": float(self.axis[-1]),
                         "steps": int(self.axis.size)},
                "layout": "values[i, j] at w = (x=axis[j], y=axis[i])",
                "csv_columns": ["x", "y", "value"]}

    def to_csv(self):
        lines = ["x,y,value"]
        for i, yv in enumerate(self.axis):
            for j, xv in enumerate(self.axis):
                lines.append(f"{xv:.10g},{yv:.10g},{self.values[i, j]:.12g}")
        return "\n".join(lines) + "\n"


def landscape_grid(tasks, objective_kind, alpha, grid, n_samples=20_000, rng=0, chunk=64):
    """Evaluate the NAL or full-step MAML objective on a ``steps x steps`` grid.

    ``grid`` is ``(w_min, w_max, steps)``; only single neurons in two dimensions
    are supported.
    """
    w_min, w_max, steps = grid
    steps = check_count(steps, "steps", minimum=2)
    if not w_min < w_max:
        raise ValidationError("grid needs w_min < w_max")
    bs = _batches(tasks, n_samples, rng)
    if bs[0].task.shape != (2, 1):
        raise ValidationError("landscapes are defined for one neuron in two dimensions")
    if objective_kind not in (NAL, MAML):
        raise ValidationError(f"objective_kind must be {NAL!r} or {MAML!r}")
    axis = np.linspace(w_min, w_max, steps)
    gx, gy = np.meshgrid(axis, axis)
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    out = np.zeros(len(cells))
    for start in range(0, len(cells), chunk):
        w = cells[start:start + chunk].T  # 2 x c, one column per cell
        for b in bs:
            if objective_kind == MAML and alpha > 0:
                # per cell the model has a single neuron, so columns act independently
                u = b.x @ w
                r = b.c * b.f(u) - b.y[:, None]
                g = b.c * b.x.T @ (r * b.d1(u)) / len(r)
                w_eval = w - alpha * g
            else:
                w_eval = w
            r = b.c * b.f(b.x @ w_eval) - b.y[:, None]
            out[start:start + chunk] += 0.5 * np.mean(r ** 2, axis=0)
    values = (out / len(bs)).reshape(steps, steps)
    return LandscapeGrid(axis, values, objective_kind, float(alpha),
                         rng if isinstance(rng, (int, np.integer)) else None, n_samples)


def spectral_profile(task):
    """Singular values of ``W*`` with ``kappa = s_1 / s_M`` and ``lambda = prod(s) / s_M^M``."""
    s = np.linalg.svd(task.weights_star, compute_uv=False)
    m = task.shape[1]
    if s.size < m or s[-1] <= 1e-12 * max(s[0], 1.0):
        raise ValidationError("W* is rank deficient; kappa and lambda are undefined")
    return {"singular_values": s, "kappa": float(s[0] / s[-1]),
            "lambda": float(np.prod(s / s[-1]))}
