"""Marginal likelihood, L1 penalty and the penalized objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .model import ModelParams, QuadratureGrid, ResponseMatrix, log_prob_table, one_hot


@dataclass(frozen=True)
class ObjectiveValue:
    """Penalized objective ``-loglik + lam * penalty`` and its parts."""

    loglik: float
    penalty: float
    lam: float
    penalized: float

    @classmethod
    def build(cls, loglik: float, penalty: float, lam: float) -> "ObjectiveValue":
        return cls(float(loglik), float(penalty), float(lam), float(-loglik + lam * penalty))


def log_prior_table(params: ModelParams, grid: QuadratureGrid) -> np.ndarray:
    """log(nu_k * w_g * phi(theta_g; mu_k, sigma_k^2)), shape (K+1, G)."""
    with np.errstate(divide="ignore"):
        log_nu = np.log(params.class_probs)
    dens = norm.logpdf(grid.nodes[None, :], params.class_means[:, None], params.class_sds[:, None])
    return log_nu[:, None] + np.log(grid.weights)[None, :] + dens


def _check_shapes(params: ModelParams, data: ResponseMatrix) -> None:
    if params.n_items != data.n_items:
        raise ValueError(f"params have {params.n_items} items, data have {data.n_items}")
    if params.thresholds.shape[1] + 1 != data.max_categories:
        raise ValueError("params and data disagree on the maximum number of categories")


def joint_from_onehot(params: ModelParams, onehot: np.ndarray, grid: QuadratureGrid) -> np.ndarray:
    lp = log_prob_table(params, grid.nodes)
    nj, kp1, ng, nm = lp.shape
    if onehot.shape[1] != nj * nm:
        raise ValueError("one-hot width does not match the parameter tables")
    table = lp.transpose(0, 3, 1, 2).reshape(nj * nm, kp1 * ng)
    cells = (onehot @ table).reshape(onehot.shape[0], kp1, ng)
    return cells + log_prior_table(params, grid)[None]


def log_joint(params: ModelParams, data: ResponseMatrix, grid: QuadratureGrid,
              onehot: np.ndarray | None = None) -> np.ndarray:
    """Per-respondent log of nu_k w_g prod_j P(Y_ij | theta_g, k) phi_k(theta_g).

    Returns an array of shape (N, K+1, G).  ``onehot`` may be passed to reuse
    ``data.one_hot()`` across calls.
    """
    _check_shapes(params, data)
    return joint_from_onehot(params, data.one_hot() if onehot is None else onehot, grid)


def row_log_likelihoods(cells: np.ndarray) -> np.ndarray:
    """log L_i from a (N, K+1, G) log-joint table, max-shift stabilized."""
    flat = cells.reshape(cells.shape[0], -1)
    top = flat.max(axis=1)
    with np.errstate(invalid="ignore"):
        out = top + np.log(np.exp(flat - top[:, None]).sum(axis=1))
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise FloatingPointError(f"non-finite likelihood for respondent {int(bad[0])}")
    return out


def respondent_likelihood(params: ModelParams, row, grid: QuadratureGrid) -> float:
    """Likelihood contribution L_i of a single response vector."""
    row = np.asarray(row, dtype=np.int64).reshape(1, -1)
    if row.shape[1] != params.n_items:
        raise ValueError("response row length does not match the number of items")
    if np.any(row < 1) or np.any(row > params.n_categories[None, :]):
        raise ValueError("response outside 1..M_j")
    x = one_hot(row, params.thresholds.shape[1] + 1)
    return float(np.exp(row_log_likelihoods(joint_from_onehot(params, x, grid))[0]))


def marginal_loglik(params: ModelParams, data: ResponseMatrix, grid: QuadratureGrid,
                    onehot: np.ndarray | None = None) -> float:
    """Sum over respondents of log L_i (pairwise summation)."""
    return float(np.sum(row_log_likelihoods(log_joint(params, data, grid, onehot))))


def penalty_value(params: ModelParams, nonuniform_weight: float = 1.0) -> float:
    """Sum of |d1_jk| + w |d2_jk| over items and non-reference classes.

    ``nonuniform_weight`` is the ratio lambda_nonuniform / lambda_uniform; the
    default of 1 gives the single-lambda penalty.
    """
    d1 = np.abs(params.dif_intercept[:, 1:]).sum()
    d2 = np.abs(params.dif_slope[:, 1:]).sum()
    return float(d1 + nonuniform_weight * d2)


def penalized_objective(params: ModelParams, data: ResponseMatrix, grid: QuadratureGrid,
                        lam: float, nonuniform_weight: float = 1.0,
                        onehot: np.ndarray | None = None) -> ObjectiveValue:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ll = marginal_loglik(params, data, grid, onehot)
    return ObjectiveValue.build(ll, penalty_value(params, nonuniform_weight), lam)
