"""Latent-class DIF detection for ordinal items via L1-penalized marginal likelihood."""

from .em import ActiveEffect, EMConfig, FitResult, PosteriorTable, e_step, fit, m_step, prox_l1, q_function, q_gradients
from .likelihood import (
    ObjectiveValue,
    marginal_loglik,
    penalized_objective,
    penalty_value,
    respondent_likelihood,
)
from .model import (
    ModelParams,
    QuadratureGrid,
    ResponseMatrix,
    category_prob,
    cumulative_prob,
    make_params,
    validate,
)
from .selection import RegPath, bic, compare_k, confirmatory_refit, default_lambda_grid, degrees_of_freedom, run_path
from .simulation import SimulationConfig, evaluate, generate, oracle_posterior, replicate

__version__ = "0.1.0"
