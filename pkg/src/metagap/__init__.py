"""Analytical and empirical comparison of MAML and non-adaptive learning."""

from ._validation import DivergenceError, SingularMatrixError, ValidationError
from .closedform import (
    excess_risk_maml,
    excess_risk_nal,
    population_maml,
    population_nal,
    q_matrix,
)
from .empirical import MAMLRegressor, NALRegressor, SgdConfig, SolutionReport
from .taskenv import FinitePool, HardEasyMixture, LinearTask, TaskEnvironment

__all__ = [
    "DivergenceError",
    "FinitePool",
    "HardEasyMixture",
    "LinearTask",
    "MAMLRegressor",
    "NALRegressor",
    "SgdConfig",
    "SingularMatrixError",
    "SolutionReport",
    "TaskEnvironment",
    "ValidationError",
    "excess_risk_maml",
    "excess_risk_nal",
    "population_maml",
    "population_nal",
    "q_matrix",
]

__version__ = "0.1.0"
