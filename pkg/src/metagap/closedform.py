"""Exact population quantities for NAL and MAML in multi-task linear regression.

Conventions used throughout:

* ``F_m(w)`` is the expected loss of ``w`` after one SGD step with step size
  ``alpha`` on ``m`` fresh samples of a new task.
* The excess risk subtracts the noise floor that no initialization can beat,
  ``1/2 E_i[nu^2 + alpha^2 nu^2 tr(Sigma_i^2) / m]``, which leaves
  ``E_m(w) = 1/2 E_i ||w - w_i*||^2_{Q_i^(m)}``.
* ``m`` (or ``s``) may be ``math.inf``; the ``alpha^2 / s`` term is then dropped.
"""

from dataclasses import dataclass
import math

import numpy as np

from ._validation import (
    ValidationError,
    check_count,
    check_positive,
    check_spd,
    check_vector,
    spd_solve,
)
from .taskenv import FinitePool, HardEasyMixture

CLOSED_FORM = "ClosedForm"
MONTE_CARLO = "MonteCarlo"


@dataclass(frozen=True)
class QMatrix:
    matrix: np.ndarray
    alpha: float
    sample_count: float


@dataclass(frozen=True)
class TwoTaskCoefficients:
    a_hard: float
    a_easy: float


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    source: str = CLOSED_FORM
    stderr: float = 0.0

    def __post_init__(self):
        if self.value < -1e-12:
            raise ValidationError(f"excess risk cannot be negative, got {self.value}")
        if self.stderr < 0:
            raise ValidationError("stderr must be nonnegative")

    def to_dict(self):
        return {"value": self.value, "source": self.source, "stderr": self.stderr}


def _perturbation_scale(alpha, s):
    return 0.0 if s == math.inf else alpha ** 2 / s


def q_matrix(cov, alpha, s):
    """``(I - a S) S (I - a S) + (a^2 / s) (tr(S^2) S + S^3)`` for ``S = cov``."""
    cov = check_spd(cov)
    s = check_count(s, "s", allow_inf=True)
    eye = np.eye(cov.shape[0])
    pre = eye - alpha * cov
    cov2 = cov @ cov
    q = pre @ cov @ pre + _perturbation_scale(alpha, s) * (np.trace(cov2) * cov + cov2 @ cov)
    return QMatrix(0.5 * (q + q.T), float(alpha), s)


def isotropic_q(rho, alpha, s, d):
    """Scalar ``q`` with ``q_matrix(rho I_d, alpha, s) = q I_d``."""
    return rho * (1 - alpha * rho) ** 2 + _perturbation_scale(alpha, s) * (d + 1) * rho ** 3


def two_task_coefficients(rho_hard, rho_easy, alpha, m, d):
    m = check_count(m, "m", allow_inf=True)
    return TwoTaskCoefficients(isotropic_q(rho_hard, alpha, m, d),
                               isotropic_q(rho_easy, alpha, m, d))


def _check_env(env):
    if not isinstance(env, (FinitePool, HardEasyMixture)):
        raise ValidationError(f"unsupported environment {type(env).__name__}")


def population_nal(env):
    """Minimizer of the average population loss, ``E[S]^-1 E[S w*]``."""
    _check_env(env)
    if isinstance(env, HardEasyMixture):
        rh, re = env.rho_hard, env.rho_easy
        return np.full(env.dim, rh * env.center_dist / (rh + re))
    return spd_solve(env.mean_covariance(), env.mean_weighted_optimum(), "E[Sigma]")


def population_maml(env, alpha, n_inner):
    """Minimizer of ``F_{n_inner}``, ``E[Q]^-1 E[Q w*]`` with ``Q = Q^(n_inner)``."""
    _check_env(env)
    n_inner = check_count(n_inner, "n_inner", allow_inf=True)
    if isinstance(env, HardEasyMixture):
        bh = isotropic_q(env.rho_hard, alpha, n_inner, env.dim)
        be = isotropic_q(env.rho_easy, alpha, n_inner, env.dim)
        if bh + be <= 0:
            raise ValidationError("E[Q] is singular for this step size")
        return np.full(env.dim, bh * env.center_dist / (bh + be))
    qs = [q_matrix(t.covariance, alpha, n_inner).matrix for t in env.tasks]
    p = env.probabilities
    mean_q = sum(pi * q for pi, q in zip(p, qs))
    mean_qw = sum(pi * q @ t.weights_star for pi, q, t in zip(p, qs, env.tasks))
    return spd_solve(mean_q, mean_qw, "E[Q]")


def excess_risk_at(env, w, alpha, m):
    """``1/2 E_i ||w - w_i*||^2_{Q_i^(m)}`` for an arbitrary initialization ``w``."""
    _check_env(env)
    m = check_count(m, "m", allow_inf=True)
    w = check_vector(w, "w", dim=env.dim)
    if isinstance(env, HardEasyMixture):
        d = env.dim
        ah = isotropic_q(env.rho_hard, alpha, m, d)
        ae = isotropic_q(env.rho_easy, alpha, m, d)
        hard = np.sum((w - env.center_dist) ** 2) + d * env.spread_hard
        easy = np.sum(w ** 2) + d * env.spread_easy
        value = 0.25 * (ah * hard + ae * easy)
    else:
        value = 0.0
        for p, t in zip(env.probabilities, env.tasks):
            diff = w - t.weights_star
            value += 0.5 * p * diff @ q_matrix(t.covariance, alpha, m).matrix @ diff
    return RiskEstimate(max(float(value), 0.0))


def _mixture_nal_risk(ah, ae, rh, re, R, r_h, r_e, d):
    return d / (4 * (re + rh) ** 2) * (
        (ae * re ** 2 + 2 * ae * re * rh) * r_e + ae * rh ** 2 * (r_e + R ** 2)
        + (ah * rh ** 2 + 2 * ah * re * rh) * r_h + ah * re ** 2 * (r_h + R ** 2))


def _mixture_maml_risk(ah, ae, R, r_h, r_e, d):
    return d / (4 * (ae + ah) ** 2) * (
        (ae ** 3 + 2 * ae ** 2 * ah) * r_e + (ah ** 3 + 2 * ae * ah ** 2) * r_h
        + ae * ah ** 2 * (r_e + R ** 2) + ae ** 2 * ah * (r_h + R ** 2))


def mixture_excess_risks(env, alpha, m):
    """Closed-form (NAL, MAML) excess risks of the hard/easy mixture with ``n_inner = m``.

    These are the weighted sums of ``r_E``, ``r_H`` and ``R^2`` obtained by
    enumerating the hard/easy combinations of the mixture.
    """
    if not isinstance(env, HardEasyMixture):
        raise ValidationError("mixture_excess_risks needs a HardEasyMixture")
    c = two_task_coefficients(env.rho_hard, env.rho_easy, alpha, m, env.dim)
    args = (env.center_dist, env.spread_hard, env.spread_easy, env.dim)
    nal = _mixture_nal_risk(c.a_hard, c.a_easy, env.rho_hard, env.rho_easy, *args)
    maml = _mixture_maml_risk(c.a_hard, c.a_easy, *args)
    return nal, maml


def excess_risk_nal(env, alpha, m):
    _check_env(env)
    if isinstance(env, HardEasyMixture):
        m = check_count(m, "m", allow_inf=True)
        return RiskEstimate(max(mixture_excess_risks(env, alpha, m)[0], 0.0))
    return excess_risk_at(env, population_nal(env), alpha, m)


def excess_risk_maml(env, alpha, m, n_inner):
    _check_env(env)
    if isinstance(env, HardEasyMixture) and n_inner == m:
        m = check_count(m, "m", allow_inf=True)
        return RiskEstimate(max(mixture_excess_risks(env, alpha, m)[1], 0.0))
    return excess_risk_at(env, population_maml(env, alpha, n_inner), alpha, m)


def two_task_excess(rho_hard, rho_easy, alpha, m, d, separation_sq=4.0):
    """Closed-form (NAL, MAML) excess risks for two isotropic tasks with ``n_inner = m``.

    ``separation_sq`` is ``||w1* - w2*||^2``; the risks scale linearly in it
    and the commonly quoted expressions correspond to a separation of 4.
    """
    c = two_task_coefficients(rho_hard, rho_easy, alpha, m, d)
    ah, ae = c.a_hard, c.a_easy
    scale = separation_sq / 4.0
    nal = (ae * rho_hard ** 2 + ah * rho_easy ** 2) / (rho_easy + rho_hard) ** 2
    maml = ae * ah / (ae + ah) if ae + ah > 0 else 0.0
    return scale * nal, scale * maml


def geography_ratio_approx(R, r_hard):
    """Large-sample approximation ``1 + R^2 / r_H`` of the NAL/MAML risk ratio."""
    check_positive(r_hard, "r_hard")
    return 1.0 + R ** 2 / r_hard


def noise_floor(env, alpha, m):
    """``1/2 E_i[nu^2 + alpha^2 nu^2 tr(Sigma_i^2) / m]``."""
    _check_env(env)
    m = check_count(m, "m", allow_inf=True)
    k = _perturbation_scale(alpha, m)
    if isinstance(env, HardEasyMixture):
        tr = 0.5 * env.dim * (env.rho_hard ** 2 + env.rho_easy ** 2)
        return 0.5 * env.noise_var * (1 + k * tr)
    return sum(0.5 * p * t.noise_var * (1 + k * np.trace(t.covariance @ t.covariance))
               for p, t in zip(env.probabilities, env.tasks))
