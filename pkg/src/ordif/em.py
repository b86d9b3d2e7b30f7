"""Penalized EM with proximal-gradient M-steps.

Each iteration computes the joint posterior over (class, node), then takes one
gradient step on the expected complete-data log-likelihood for the smooth
parameters and one soft-thresholded step for the DIF effects.  A shared
backtracking loop shrinks all step sizes until the penalized marginal
objective strictly decreases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .likelihood import (
    ObjectiveValue,
    _check_shapes,
    joint_from_onehot,
    penalty_value,
    row_log_likelihoods,
)
from .model import (
    GAP_EPS,
    PROB_CLAMP,
    SD_FLOOR,
    SLOPE_EPS,
    ModelParams,
    QuadratureGrid,
    ResponseMatrix,
    kernel_tables,
    log_prob_table,
)

logger = logging.getLogger(__name__)

UNIFORM = "uniform"
NONUNIFORM = "nonuniform"


@dataclass(frozen=True, eq=False)
class PosteriorTable:
    """Joint posterior q[i, k, g] over latent class and quadrature node."""

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def class_marginals(self) -> np.ndarray:
        return self.q.sum(axis=2)

    def map_classes(self) -> np.ndarray:
        return np.argmax(self.class_marginals, axis=1)

    def check_normalized(self, tol: float = 1e-10) -> None:
        tot = self.q.sum(axis=(1, 2))
        bad = np.flatnonzero(np.abs(tot - 1.0) > tol)
        if bad.size:
            raise ValueError(f"posterior row {int(bad[0])} sums to {tot[bad[0]]!r}, not 1")


def posterior_from_cells(cells: np.ndarray) -> PosteriorTable:
    n = cells.shape[0]
    flat = cells.reshape(n, -1)
    top = flat.max(axis=1, keepdims=True)
    bad = np.flatnonzero(~np.isfinite(top[:, 0]))
    if bad.size:
        raise FloatingPointError(f"posterior is all zero for respondent {int(bad[0])}")
    w = np.exp(flat - top)
    w /= w.sum(axis=1, keepdims=True)
    return PosteriorTable(w.reshape(cells.shape))


def e_step(params: ModelParams, data: ResponseMatrix, grid: QuadratureGrid) -> PosteriorTable:
    _check_shapes(params, data)
    return posterior_from_cells(joint_from_onehot(params, data.one_hot(), grid))


@dataclass
class EMConfig:
    """Controls for the penalized EM loop.

    ``tol`` is the absolute change in the penalized objective that declares
    convergence.  ``lambda_scale`` converts the user-facing tuning parameter
    into the multiplier of the penalty on the summed log-likelihood:
    ``"none"`` uses it as is, ``"n"`` multiplies by N and ``"nj"`` by N * J.
    The same factor multiplies ``tol``, so both are expressed per response.

    With ``scaling="fisher"`` each coordinate's step is divided by its
    diagonal complete-data information, which makes a unit step the natural
    default.  ``accelerate`` wraps pairs of EM steps in a squared
    extrapolation (SQUAREM) that is only accepted when it lowers the
    objective further.
    """

    max_iters: int = 1000
    tol: float = 1e-6
    step_a: float = 1.0
    step_tau: float = 1.0
    step_delta: float = 1.0
    step_mu: float = 1.0
    step_sigma: float = 1.0
    backtrack_factor: float = 0.5
    max_backtracks: int = 30
    seed: int = 0
    n_starts: int = 1
    carry_step_sizes: bool = False
    nonuniform_weight: float = 1.0
    lambda_scale: str = "nj"
    scaling: str = "fisher"
    accelerate: bool = False
    max_extrapolation: float = 64.0
    info_floor: float = 1e-4

    def __post_init__(self):
        for name in ("max_iters", "max_backtracks", "n_starts"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("tol", "step_a", "step_tau", "step_delta", "step_mu", "step_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.nonuniform_weight < 0:
            raise ValueError("nonuniform_weight must be non-negative")
        if self.scaling not in ("none", "fisher"):
            raise ValueError("scaling must be 'none' or 'fisher'")
        if self.lambda_scale not in ("none", "n", "nj"):
            raise ValueError("lambda_scale must be 'none', 'n' or 'nj'")
        if self.max_extrapolation < 1:
            raise ValueError("max_extrapolation must be at least 1")

    def steps(self) -> np.ndarray:
        return np.array([self.step_a, self.step_tau, self.step_delta, self.step_mu, self.step_sigma])

    def scale_factor(self, n: int, j: int) -> float:
        return {"none": 1.0, "n": float(n), "nj": float(n * j)}[self.lambda_scale]

    def effective_lambda(self, lam: float, n: int, j: int) -> float:
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        return lam * self.scale_factor(n, j)


class ActiveEffect(NamedTuple):
    item: int
    klass: int
    effect: str


def active_set(params: ModelParams) -> tuple[ActiveEffect, ...]:
    """Nonzero DIF effects, ordered by item, class, then effect type."""
    out = []
    for j in range(params.n_items):
        for k in range(1, params.n_classes):
            if params.dif_intercept[j, k] != 0:
                out.append(ActiveEffect(j, k, UNIFORM))
            if params.dif_slope[j, k] != 0:
                out.append(ActiveEffect(j, k, NONUNIFORM))
    return tuple(out)


def free_masks(n_items: int, n_classes: int, effects=None) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks of DIF entries allowed to move.

    With ``effects=None`` every non-reference entry is free; otherwise only the
    listed :class:`ActiveEffect` entries are.
    """
    m1 = np.zeros((n_items, n_classes), dtype=bool)
    m2 = np.zeros((n_items, n_classes), dtype=bool)
    if effects is None:
        m1[:, 1:] = True
        m2[:, 1:] = True
        return m1, m2
    for e in effects:
        e = ActiveEffect(*e)
        (m1 if e.effect == UNIFORM else m2)[e.item, e.klass] = True
    m1[:, 0] = False
    m2[:, 0] = False
    return m1, m2


@dataclass(frozen=True, eq=False)
class FitResult:
    params: ModelParams
    objective: ObjectiveValue
    n_iters: int
    converged: bool
    active_set: tuple[ActiveEffect, ...]
    posterior: PosteriorTable
    trace: np.ndarray
    lam: float = 0.0
    stalled: bool = False
    free_effects: tuple[ActiveEffect, ...] | None = None

    @property
    def loglik(self) -> float:
        return self.objective.loglik


def expected_counts(posterior: PosteriorTable, onehot: np.ndarray, n_items: int) -> np.ndarray:
    """Expected response counts n[j, k, g, m] = sum_i q_ikg 1{Y_ij = m}."""
    n, kp1, ng = posterior.q.shape
    nm = onehot.shape[1] // n_items
    c = onehot.T @ posterior.q.reshape(n, kp1 * ng)
    return c.reshape(n_items, nm, kp1, ng).transpose(0, 2, 3, 1)


def _structural_logdens(params: ModelParams, grid: QuadratureGrid) -> np.ndarray:
    return norm.logpdf(grid.nodes[None, :], params.class_means[:, None], params.class_sds[:, None])


def q_function(params: ModelParams, posterior: PosteriorTable, data: ResponseMatrix,
               grid: QuadratureGrid) -> float:
    """Expected complete-data log-likelihood Q(params | posterior)."""
    _check_shapes(params, data)
    posterior.check_normalized()
    counts = expected_counts(posterior, data.one_hot(), data.n_items)
    item_part = np.sum(counts * log_prob_table(params, grid.nodes))
    w = posterior.q.sum(axis=0)
    with np.errstate(divide="ignore"):
        log_nu = np.log(params.class_probs)
    struct = _structural_logdens(params, grid) + log_nu[:, None]
    struct_part = np.sum(np.where(w > 0, w * struct, 0.0))
    return float(item_part + struct_part)


@dataclass(frozen=True, eq=False)
class ParamGradient:
    """Partial derivatives of Q for the free parameters.

    ``tau`` matches the padded threshold layout (zeros in padding);
    ``d1``/``d2`` are J x K and ``mu``/``sigma`` have length K (reference
    class excluded).
    """

    a: np.ndarray
    tau: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


def _gradients_from_counts(params: ModelParams, counts: np.ndarray, w: np.ndarray,
                           grid: QuadratureGrid) -> ParamGradient:
    prob, dens = kernel_tables(params, grid.nodes)
    ratio = counts / np.maximum(prob, PROB_CLAMP)
    pad = np.zeros(dens.shape[:-1] + (1,))
    f_up = np.concatenate([dens, pad], axis=-1)
    f_lo = np.concatenate([pad, dens], axis=-1)
    shift = np.sum(ratio * (f_up - f_lo), axis=-1)  # d Q / d eta for a common shift, (J, K+1, G)
    d_tau = np.sum(dens * (ratio[..., :-1] - ratio[..., 1:]), axis=(1, 2))
    d_int = shift.sum(axis=2)
    d_slope = -(shift * grid.nodes[None, None, :]).sum(axis=2)
    mu = params.class_means[:, None]
    sd = params.class_sds[:, None]
    z = grid.nodes[None, :] - mu
    d_mu = np.sum(w * z / sd**2, axis=1)
    d_sd = np.sum(w * (z**2 / sd**3 - 1.0 / sd), axis=1)
    return ParamGradient(
        a=d_slope.sum(axis=1),
        tau=d_tau,
        d1=d_int[:, 1:],
        d2=d_slope[:, 1:],
        mu=d_mu[1:],
        sigma=d_sd[1:],
    )


def _fisher_diagonal(params: ModelParams, counts: np.ndarray, w: np.ndarray,
                     grid: QuadratureGrid) -> ParamGradient:
    """Diagonal of the complete-data information implied by expected counts."""
    prob, dens = kernel_tables(params, grid.nodes)
    p = np.maximum(prob, PROB_CLAMP)
    tot = counts.sum(axis=-1, keepdims=True)
    pad = np.zeros(dens.shape[:-1] + (1,))
    f_up = np.concatenate([dens, pad], axis=-1)
    f_lo = np.concatenate([pad, dens], axis=-1)
    i_shift = tot[..., 0] * np.sum((f_up - f_lo) ** 2 / p, axis=-1)
    i_tau = np.sum(tot * dens**2 * (1.0 / p[..., :-1] + 1.0 / p[..., 1:]), axis=(1, 2))
    th2 = grid.nodes[None, None, :] ** 2
    i_int = i_shift.sum(axis=2)
    i_slope = (i_shift * th2).sum(axis=2)
    sd = params.class_sds
    wk = w.sum(axis=1)
    return ParamGradient(
        a=i_slope.sum(axis=1),
        tau=i_tau,
        d1=i_int[:, 1:],
        d2=i_slope[:, 1:],
        mu=wk[1:] / sd[1:] ** 2,
        sigma=2.0 * wk[1:] / sd[1:] ** 2,
    )


def q_gradients(params: ModelParams, posterior: PosteriorTable, data: ResponseMatrix,
                grid: QuadratureGrid) -> ParamGradient:
    """Analytic gradient of :func:`q_function` (probability clamping ignored)."""
    _check_shapes(params, data)
    posterior.check_normalized()
    counts = expected_counts(posterior, data.one_hot(), data.n_items)
    return _gradients_from_counts(params, counts, posterior.q.sum(axis=0), grid)


def prox_l1(x, threshold):
    """Soft-thresholding: sign(x) * max(|x| - threshold, 0)."""
    if np.any(np.asarray(threshold) < 0):
        raise ValueError("threshold must be non-negative")
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def project_thresholds(tau: np.ndarray, n_categories: np.ndarray, gap_eps: float = GAP_EPS) -> np.ndarray:
    out = np.array(tau, dtype=float)
    for m in range(1, out.shape[1]):
        live = n_categories - 1 > m
        out[live, m] = np.maximum(out[live, m], out[live, m - 1] + gap_eps)
    return out


def sd_floor(grid: QuadratureGrid) -> float:
    """Smallest class SD the grid integrates to within 1e-3.

    The rectangle rule loses accuracy once the SD drops below about 0.62
    node spacings, and the likelihood of a collapsing class would then be
    inflated, so the floor is the larger of ``SD_FLOOR`` and 0.65 spacings.
    """
    spacing = float(np.max(np.diff(grid.nodes))) if grid.size > 1 else 0.0
    return max(SD_FLOOR, 0.65 * spacing)


def project(params_kw: dict, n_categories: np.ndarray, min_sd: float = SD_FLOOR) -> dict:
    """Restore feasibility of a candidate, updating the keyword dict in place."""
    kw = params_kw
    kw["thresholds"] = project_thresholds(kw["thresholds"], n_categories)
    kw["slopes"] = np.maximum(kw["slopes"], SLOPE_EPS)
    floor = SLOPE_EPS - kw["slopes"][:, None]
    d2 = kw["dif_slope"]
    kw["dif_slope"] = np.where(d2 < floor, floor, d2)
    sds = np.array(kw["class_sds"], dtype=float)
    sds[1:] = np.maximum(sds[1:], min_sd)
    kw["class_sds"] = sds
    return kw


class MStepResult(NamedTuple):
    params: ModelParams
    objective: ObjectiveValue
    backtracks: int
    stalled: bool


class _Workspace:
    """Data-dependent arrays reused across EM iterations."""

    def __init__(self, data: ResponseMatrix, grid: QuadratureGrid, lam: float,
                 config: EMConfig, masks):
        self.data = data
        self.grid = grid
        self.onehot = data.one_hot()
        self.lam = lam
        self.config = config
        self.m1, self.m2 = masks
        self.min_sd = sd_floor(grid)

    def evaluate(self, params: ModelParams):
        cells = joint_from_onehot(params, self.onehot, self.grid)
        ll = float(np.sum(row_log_likelihoods(cells)))
        pen = penalty_value(params, self.config.nonuniform_weight)
        return ObjectiveValue.build(ll, pen, self.lam), cells


def _candidate(params: ModelParams, grad: ParamGradient, metric: ParamGradient, nu: np.ndarray,
               eta: np.ndarray, ws: _Workspace) -> ModelParams:
    eta_a, eta_tau, eta_d, eta_mu, eta_sd = eta
    lam, w2 = ws.lam, ws.config.nonuniform_weight
    tau = params.thresholds + eta_tau * metric.tau * grad.tau
    d1 = np.zeros_like(params.dif_intercept)
    d2 = np.zeros_like(params.dif_slope)
    s1 = eta_d * metric.d1
    s2 = eta_d * metric.d2
    d1[:, 1:] = prox_l1(params.dif_intercept[:, 1:] + s1 * grad.d1, lam * s1)
    d2[:, 1:] = prox_l1(params.dif_slope[:, 1:] + s2 * grad.d2, lam * w2 * s2)
    d1[~ws.m1] = 0.0
    d2[~ws.m2] = 0.0
    mu = params.class_means.copy()
    sd = params.class_sds.copy()
    mu[1:] += eta_mu * metric.mu * grad.mu
    sd[1:] += eta_sd * metric.sigma * grad.sigma
    kw = dict(
        thresholds=tau,
        slopes=params.slopes + eta_a * metric.a * grad.a,
        dif_intercept=d1,
        dif_slope=d2,
        class_probs=nu,
        class_means=mu,
        class_sds=sd,
    )
    return ModelParams(n_categories=params.n_categories, **project(kw, params.n_categories, ws.min_sd))


def _inverse_metric(params, counts, w, ws: _Workspace) -> ParamGradient:
    if ws.config.scaling == "none":
        one = lambda x: np.ones_like(x)  # noqa: E731
        g = params
        return ParamGradient(one(g.slopes), one(g.thresholds), one(g.dif_intercept[:, 1:]),
                             one(g.dif_slope[:, 1:]), one(g.class_means[1:]), one(g.class_sds[1:]))
    info = _fisher_diagonal(params, counts, w, ws.grid)
    floor = ws.config.info_floor * ws.data.n_respondents
    inv = lambda x: 1.0 / np.maximum(x, floor)  # noqa: E731
    return ParamGradient(inv(info.a), inv(info.tau), inv(info.d1), inv(info.d2), inv(info.mu),
                         inv(info.sigma))


def _m_step(params, posterior, ws: _Workspace, current: ObjectiveValue, eta0: np.ndarray):
    counts = expected_counts(posterior, ws.onehot, ws.data.n_items)
    w = posterior.q.sum(axis=0)
    grad = _gradients_from_counts(params, counts, w, ws.grid)
    metric = _inverse_metric(params, counts, w, ws)
    nu = posterior.class_marginals.mean(axis=0)
    nu = nu / nu.sum()
    eta = np.array(eta0, dtype=float)
    rho = ws.config.backtrack_factor
    for b in range(ws.config.max_backtracks + 1):
        cand = _candidate(params, grad, metric, nu, eta, ws)
        try:
            obj, cells = ws.evaluate(cand)
        except FloatingPointError:
            obj = None
        if obj is not None and obj.penalized < current.penalized:
            return cand, obj, cells, b, eta
        eta = eta * rho
    return params, current, None, ws.config.max_backtracks, eta


def m_step(params: ModelParams, posterior: PosteriorTable, data: ResponseMatrix,
           grid: QuadratureGrid, lam: float, config: EMConfig,
           current_objective: ObjectiveValue | None = None, free_effects=None) -> MStepResult:
    """One penalized M-step with shared backtracking.

    ``lam`` is the multiplier of the penalty on the summed log-likelihood.
    Returns the input parameters flagged ``stalled`` when no step size in the
    backtracking schedule decreases the objective.
    """
    ws = _Workspace(data, grid, lam, config, free_masks(params.n_items, params.n_classes, free_effects))
    if current_objective is None:
        current_objective, _ = ws.evaluate(params)
    new, obj, cells, b, _ = _m_step(params, posterior, ws, current_objective, config.steps())
    return MStepResult(new, obj, b, cells is None)


def default_init(data: ResponseMatrix, n_classes_extra: int, rng: np.random.Generator | None = None,
                 ) -> ModelParams:
    """Data-informed feasible starting values.

    Thresholds are logits of empirical cumulative proportions (clamped to
    [-4, 4]); slopes 1; DIF zero; uniform class weights; class means spaced
    at -0.5 k.  With ``rng`` the class means and slopes are jittered.
    """
    nj, mmax = data.n_items, data.max_categories
    tau = np.full((nj, mmax - 1), np.inf)
    n = data.n_respondents
    for j in range(nj):
        mj = data.n_categories[j]
        counts = np.bincount(data.values[:, j], minlength=mj + 1)[1:]
        cum = np.cumsum(counts)[:-1] / n
        t = np.clip(logit(np.clip(cum, 1e-12, 1 - 1e-12)), -4.0, 4.0)
        tau[j, : mj - 1] = t + np.arange(mj - 1) * GAP_EPS
    tau = project_thresholds(tau, data.n_categories)
    kp1 = n_classes_extra + 1
    slopes = np.ones(nj)
    mu = -0.5 * np.arange(kp1, dtype=float)
    if rng is not None:
        slopes = slopes + rng.uniform(-0.2, 0.2, nj)
        mu[1:] += rng.uniform(-0.25, 0.25, kp1 - 1)
    return ModelParams(
        thresholds=tau,
        slopes=slopes,
        dif_intercept=np.zeros((nj, kp1)),
        dif_slope=np.zeros((nj, kp1)),
        class_probs=np.full(kp1, 1.0 / kp1),
        class_means=mu,
        class_sds=np.ones(kp1),
        n_categories=data.n_categories,
    )


def relabel_by_mean(params: ModelParams, posterior: PosteriorTable | None = None):
    """Order non-reference classes by ascending mean."""
    order = np.concatenate([[0], 1 + np.argsort(params.class_means[1:], kind="stable")])
    if np.array_equal(order, np.arange(order.size)):
        return params, posterior
    new = replace(
        params,
        dif_intercept=params.dif_intercept[:, order],
        dif_slope=params.dif_slope[:, order],
        class_probs=params.class_probs[order],
        class_means=params.class_means[order],
        class_sds=params.class_sds[order],
    )
    post = None if posterior is None else PosteriorTable(posterior.q[:, order, :])
    return new, post


def _to_vector(p: ModelParams) -> np.ndarray:
    """Unconstrained coordinates used for extrapolation (log scale for nu, sigma)."""
    with np.errstate(divide="ignore"):
        log_nu = np.log(p.class_probs)
    return np.concatenate([
        p.thresholds[np.isfinite(p.thresholds)], p.slopes, p.dif_intercept.ravel(),
        p.dif_slope.ravel(), log_nu, p.class_means, np.log(p.class_sds),
    ])


def _from_vector(x: np.ndarray, like: ModelParams, min_sd: float = SD_FLOOR) -> ModelParams:
    """Inverse of :func:`_to_vector`; keeps ``like``'s DIF zeros and restores feasibility."""
    fin = np.isfinite(like.thresholds)
    nj, kp1 = like.dif_intercept.shape
    sizes = [int(fin.sum()), nj, nj * kp1, nj * kp1, kp1, kp1, kp1]
    tau_v, a, d1, d2, log_nu, mu, log_sd = np.split(x, np.cumsum(sizes)[:-1])
    tau = np.full(like.thresholds.shape, np.inf)
    tau[fin] = tau_v
    log_nu = np.where(np.isfinite(log_nu), log_nu, -np.inf)
    nu = np.exp(log_nu - log_nu.max())
    mu = mu.copy()
    sd = np.exp(log_sd)
    mu[0], sd[0] = 0.0, 1.0
    keep1 = like.dif_intercept != 0
    keep2 = like.dif_slope != 0
    kw = project(dict(
        thresholds=tau, slopes=a,
        dif_intercept=np.where(keep1, d1.reshape(nj, kp1), 0.0),
        dif_slope=np.where(keep2, d2.reshape(nj, kp1), 0.0),
        class_probs=nu / nu.sum(), class_means=mu, class_sds=sd,
    ), like.n_categories, min_sd)
    kw["dif_slope"] = np.where(keep2, kw["dif_slope"], 0.0)
    return ModelParams(n_categories=like.n_categories, **kw)


class _Loop:
    """EM iteration state: current iterate, objective, joint table and trace."""

    def __init__(self, ws: _Workspace, params: ModelParams):
        self.ws = ws
        self.params = params
        self.obj, self.cells = ws.evaluate(params)
        self.trace = [self.obj.penalized]
        self.n_steps = 0
        self.eta = ws.config.steps()

    def em_step(self, params=None, obj=None, cells=None):
        """One EM map from (params, obj, cells); defaults to the current iterate."""
        if params is None:
            params, obj, cells = self.params, self.obj, self.cells
        cfg = self.ws.config
        start = self.eta if cfg.carry_step_sizes else cfg.steps()
        new, new_obj, new_cells, _, self.eta = _m_step(params, posterior_from_cells(cells), self.ws,
                                                       obj, start)
        self.n_steps += 1
        return new, new_obj, new_cells

    def accept(self, params, obj, cells) -> float:
        change = abs(self.obj.penalized - obj.penalized)
        self.params, self.obj, self.cells = params, obj, cells
        self.trace.append(obj.penalized)
        return change


def _squarem_cycle(loop: _Loop) -> tuple[bool, bool]:
    """Two EM steps plus one squared extrapolation (SQUAREM, scheme 3).

    The extrapolated point is kept only if one EM step from it beats the
    second plain EM step, so accepted objectives stay monotone.  Returns
    ``(converged, stalled)``.
    """
    tol = loop.tol
    x0 = loop.params
    x1, o1, c1 = loop.em_step()
    if c1 is None:
        return True, True
    if loop.accept(x1, o1, c1) < tol:
        return True, False
    x2, o2, c2 = loop.em_step()
    if c2 is None:
        return True, True
    r = _to_vector(x1) - _to_vector(x0)
    v = _to_vector(x2) - _to_vector(x1) - r
    nv = np.linalg.norm(v)
    alpha = -np.linalg.norm(r) / nv if nv > 0 else -1.0
    alpha = max(alpha, -loop.ws.config.max_extrapolation)
    best = (x2, o2, c2)
    # alpha == -1 reproduces x2; oscillating EM maps give alpha in (-1, 0)
    if abs(alpha + 1.0) > 1e-8:
        try:
            xp = _from_vector(_to_vector(x0) - 2.0 * alpha * r + alpha**2 * v, x2, loop.ws.min_sd)
            op, cp = loop.ws.evaluate(xp)
        except FloatingPointError:
            op = None
        if op is not None:
            x3, o3, c3 = loop.em_step(xp, op, cp)
            if c3 is None:
                x3, o3, c3 = xp, op, cp
            if o3.penalized < o2.penalized:
                best = (x3, o3, c3)
    if best[0] is not x2:
        loop.trace.append(o2.penalized)
    return loop.accept(*best) < tol, False


def _run(data, grid, lam, config, init, masks, lam_user, free_effects, tol) -> FitResult:
    ws = _Workspace(data, grid, lam, config, masks)
    params = init.replace(
        dif_intercept=np.where(masks[0], init.dif_intercept, 0.0),
        dif_slope=np.where(masks[1], init.dif_slope, 0.0),
    )
    loop = _Loop(ws, params)
    loop.tol = tol
    converged = stalled = False
    while loop.n_steps < config.max_iters:
        if config.accelerate and config.max_iters - loop.n_steps >= 3:
            converged, stalled = _squarem_cycle(loop)
        else:
            new, new_obj, new_cells = loop.em_step()
            if new_cells is None:
                converged = stalled = True
            else:
                converged = loop.accept(new, new_obj, new_cells) < tol
        if converged:
            break
    post = posterior_from_cells(loop.cells)
    params, post = relabel_by_mean(loop.params, post)
    if not converged:
        logger.info("EM stopped at max_iters=%d (lambda=%g)", config.max_iters, lam_user)
    return FitResult(
        params=params,
        objective=loop.obj,
        n_iters=loop.n_steps,
        converged=converged,
        active_set=active_set(params),
        posterior=post,
        trace=np.asarray(loop.trace),
        lam=lam_user,
        stalled=stalled,
        free_effects=None if free_effects is None else tuple(ActiveEffect(*e) for e in free_effects),
    )


def fit(data: ResponseMatrix, n_classes_extra: int, lam: float, grid: QuadratureGrid | None = None,
        config: EMConfig | None = None, init: ModelParams | None = None,
        free_effects=None) -> FitResult:
    """Penalized EM fit for a fixed tuning parameter.

    Parameters
    ----------
    data : ResponseMatrix
    n_classes_extra : int
        Number of non-reference classes K.
    lam : float
        User-facing tuning parameter, scaled by ``config.lambda_scale``.
    init : ModelParams, optional
        Warm start; overrides the default initialization and ``n_starts``.
    free_effects : iterable of ActiveEffect, optional
        Restrict the DIF effects allowed to be nonzero (others pinned at 0).
    """
    if n_classes_extra < 0:
        raise ValueError("K must be non-negative")
    grid = QuadratureGrid.regular() if grid is None else grid
    config = EMConfig() if config is None else config
    lam_eff = config.effective_lambda(lam, data.n_respondents, data.n_items)
    tol = config.tol * config.scale_factor(data.n_respondents, data.n_items)
    masks = free_masks(data.n_items, n_classes_extra + 1, free_effects)
    if init is not None:
        if init.n_classes_extra != n_classes_extra:
            raise ValueError("initial parameters have the wrong number of classes")
        return _run(data, grid, lam_eff, config, init, masks, lam, free_effects, tol)
    best = None
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    for s in range(config.n_starts):
        rng = None if s == 0 else np.random.default_rng(seeds[s])
        res = _run(data, grid, lam_eff, config, default_init(data, n_classes_extra, rng), masks, lam,
                   free_effects, tol)
        if best is None or res.objective.penalized < best.objective.penalized:
            best = res
    return best
