"""Data generation, oracle classifier and recovery metrics for simulation studies."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .em import NONUNIFORM, UNIFORM, EMConfig, FitResult, PosteriorTable, e_step
from .model import GAP_EPS, ModelParams, QuadratureGrid, ResponseMatrix
from .selection import run_path

logger = logging.getLogger(__name__)

DIF_ITEMS_BY_J = {15: 5, 25: 10, 50: 20}
THREADS_ENV = "ORDIF_THREADS"


class ContractError(ValueError):
    """Inputs that violate an operation's documented preconditions."""


@dataclass(frozen=True)
class SimulationConfig:
    """Design of one simulation condition.

    ``pi`` is either the focal-class proportion (two classes) or a full
    vector of class probabilities starting with the reference class.
    ``mu`` and ``sigma`` list the non-reference class means and SDs.
    ``n_dif_items`` defaults to 5, 10 or 20 for J = 15, 25 or 50.
    """

    n: int = 1000
    j: int = 15
    k_extra: int = 1
    m: int = 4
    pi: float | tuple[float, ...] = 0.3
    mu: tuple[float, ...] = (1.0, 1.5)
    sigma: tuple[float, ...] = (0.8, 0.75)
    n_dif_items: int | None = None
    dif_uniform_range: tuple[float, float] = (1.0, 1.5)
    dif_nonuniform_range: tuple[float, float] = (0.5, 1.0)
    dif_third_class_range: tuple[float, float] = (0.5, 1.0)
    slope_range: tuple[float, float] = (0.5, 1.5)
    threshold_range: tuple[float, float] = (-2.0, 2.0)
    seed: int = 0
    n_reps: int = 20

    def __post_init__(self):
        if self.n < 1 or self.j < 1 or self.n_reps < 1:
            raise ValueError("n, j and n_reps must be positive")
        if self.k_extra not in (1, 2):
            raise ValueError("k_extra must be 1 or 2")
        if self.m < 2:
            raise ValueError("need at least two categories")
        if len(self.mu) < self.k_extra or len(self.sigma) < self.k_extra:
            raise ValueError("mu and sigma need one entry per non-reference class")
        if any(s <= 0 for s in self.sigma):
            raise ValueError("class SDs must be positive")
        for name in ("dif_uniform_range", "dif_nonuniform_range", "dif_third_class_range",
                     "slope_range", "threshold_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be ordered")
        if self.slope_range[0] <= 0:
            raise ValueError("slopes must be positive")
        if not 0 <= self.dif_item_count <= self.j:
            raise ValueError("n_dif_items must lie in [0, j]")
        self.class_probs()

    @property
    def dif_item_count(self) -> int:
        if self.n_dif_items is not None:
            return int(self.n_dif_items)
        if self.j not in DIF_ITEMS_BY_J:
            raise ValueError(f"no default DIF item count for J={self.j}; set n_dif_items")
        return DIF_ITEMS_BY_J[self.j]

    def class_probs(self) -> np.ndarray:
        kp1 = self.k_extra + 1
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        if pi.size == kp1:
            nu = pi
        elif pi.size == kp1 - 1:
            nu = np.concatenate([[1.0 - pi.sum()], pi])
        else:
            raise ValueError(f"pi must have {kp1 - 1} or {kp1} entries")
        if np.any(nu < 0) or np.any(nu > 1) or abs(nu.sum() - 1.0) > 1e-9:
            raise ValueError(f"class probabilities {nu} do not form a simplex")
        return nu

    def condition_name(self) -> str:
        pi = "-".join(f"{p:g}" for p in self.class_probs()[1:])
        return f"n{self.n}_j{self.j}_k{self.k_extra}_pi{pi}"


def derive_seed(seed: int, rep: int) -> int:
    """Independent 63-bit seed for replication ``rep`` of a study seeded ``seed``."""
    state = np.random.SeedSequence([int(seed), int(rep)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    responses: ResponseMatrix
    true_params: ModelParams
    true_classes: np.ndarray
    true_thetas: np.ndarray
    dif_item_indices: frozenset


def _thresholds(rng: np.random.Generator, cfg: SimulationConfig) -> np.ndarray:
    lo, hi = cfg.threshold_range
    out = np.empty((cfg.j, cfg.m - 1))
    for j in range(cfg.j):
        while True:
            t = np.sort(rng.uniform(lo, hi, cfg.m - 1))
            if cfg.m == 2 or np.min(np.diff(t)) >= GAP_EPS:
                break
        out[j] = t
    return out


def true_parameters(cfg: SimulationConfig, rng: np.random.Generator) -> ModelParams:
    kp1 = cfg.k_extra + 1
    slopes = rng.uniform(*cfg.slope_range, cfg.j)
    tau = _thresholds(rng, cfg)
    d1 = np.zeros((cfg.j, kp1))
    d2 = np.zeros((cfg.j, kp1))
    p = cfg.dif_item_count
    d1[:p, 1] = rng.uniform(*cfg.dif_uniform_range, p)
    d2[:p, 1] = rng.uniform(*cfg.dif_nonuniform_range, p)
    for k in range(2, kp1):
        d1[:p, k] = rng.uniform(*cfg.dif_third_class_range, p)
        d2[:p, k] = rng.uniform(*cfg.dif_third_class_range, p)
    return ModelParams(
        thresholds=tau,
        slopes=slopes,
        dif_intercept=d1,
        dif_slope=d2,
        class_probs=cfg.class_probs(),
        class_means=np.concatenate([[0.0], cfg.mu[: cfg.k_extra]]),
        class_sds=np.concatenate([[1.0], cfg.sigma[: cfg.k_extra]]),
        n_categories=np.full(cfg.j, cfg.m),
    )


def sample_responses(params: ModelParams, classes: np.ndarray, thetas: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw 1-based responses from the cumulative-logit model."""
    slope = params.effective_slopes()[:, classes].T  # N x J
    shift = params.dif_intercept[:, classes].T
    eta = params.thresholds[None] - (slope * thetas[:, None])[..., None] + shift[..., None]
    cum = expit(eta)  # +inf padding gives 1
    u = rng.random(slope.shape)
    return 1 + np.sum(u[..., None] > cum, axis=-1)


def generate(config: SimulationConfig, rep_seed: int) -> SimulatedDataset:
    """Simulate one dataset; identical (config, rep_seed) give identical output."""
    rng = np.random.default_rng(rep_seed)
    params = true_parameters(config, rng)
    classes = rng.choice(params.n_classes, size=config.n, p=params.class_probs)
    thetas = params.class_means[classes] + params.class_sds[classes] * rng.standard_normal(config.n)
    values = sample_responses(params, classes, thetas, rng)
    return SimulatedDataset(
        responses=ResponseMatrix(values, n_categories=np.full(config.j, config.m)),
        true_params=params,
        true_classes=classes,
        true_thetas=thetas,
        dif_item_indices=frozenset(range(config.dif_item_count)),
    )


def oracle_posterior(dataset: SimulatedDataset, grid: QuadratureGrid | None = None) -> PosteriorTable:
    """E-step at the generating parameters."""
    grid = QuadratureGrid.regular() if grid is None else grid
    return e_step(dataset.true_params, dataset.responses, grid)


# ----------------------------------------------------------------------------
# label alignment


def rereference(params: ModelParams, ref: int) -> ModelParams:
    """Equivalent parametrization in which class ``ref`` is the reference.

    The latent trait is standardized to class ``ref``'s mean and SD and the
    DIF effects are re-expressed relative to that class.  Class order is
    ``ref`` first, then the others in their original order.  The marginal
    likelihood is unchanged.
    """
    if ref == 0:
        return params
    mu_r, sd_r = params.class_means[ref], params.class_sds[ref]
    d1, d2 = params.dif_intercept, params.dif_slope
    base = params.slopes + d2[:, ref]
    tau = params.thresholds + (d1[:, ref] - base * mu_r)[:, None]
    new_d2 = (d2 - d2[:, [ref]]) * sd_r
    new_d1 = d1 - d1[:, [ref]] - (d2 - d2[:, [ref]]) * mu_r
    order = [ref] + [k for k in range(params.n_classes) if k != ref]
    return ModelParams(
        thresholds=tau,
        slopes=base * sd_r,
        dif_intercept=new_d1[:, order],
        dif_slope=new_d2[:, order],
        class_probs=params.class_probs[order],
        class_means=((params.class_means - mu_r) / sd_r)[order],
        class_sds=(params.class_sds / sd_r)[order],
        n_categories=params.n_categories,
    )


@dataclass(frozen=True, eq=False)
class Alignment:
    """Fitted parameters mapped onto the true class labels.

    ``order[k]`` is the fitted class that plays the role of true class k.
    """

    params: ModelParams
    order: tuple[int, ...]

    def posterior(self, post: PosteriorTable) -> PosteriorTable:
        return PosteriorTable(post.q[:, list(self.order), :])


def align(fitted: ModelParams, truth: ModelParams) -> Alignment:
    """Order fitted classes by ascending trait mean, matching the generator.

    If a non-reference class has the lowest mean the fit is first
    re-expressed with that class as the reference, so a fit whose reference
    landed on the wrong subgroup is still compared like for like.
    """
    if fitted.n_classes != truth.n_classes:
        raise ContractError(f"fit has K={fitted.n_classes_extra}, truth has K={truth.n_classes_extra}")
    ref = int(np.argmin(fitted.class_means))
    rp = rereference(fitted, ref)
    rest = [k for k in range(fitted.n_classes) if k != ref]
    perm = np.argsort(rp.class_means[1:], kind="stable")
    idx = [0, *(1 + perm)]
    aligned = rp.replace(
        dif_intercept=rp.dif_intercept[:, idx],
        dif_slope=rp.dif_slope[:, idx],
        class_probs=rp.class_probs[idx],
        class_means=rp.class_means[idx],
        class_sds=rp.class_sds[idx],
    )
    return Alignment(aligned, (ref, *[rest[p] for p in perm]))


# ----------------------------------------------------------------------------
# metrics


def auc_score(labels, scores) -> float:
    """Area under the ROC curve (trapezoid rule, ties count one half)."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size)
    # average ranks over tied blocks
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[a:b] = 0.5 * (a + b - 1) + 1.0
    r = np.empty(s.size)
    r[order] = ranks
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def detection_rates(flagged, truth, n_items: int) -> tuple[float, float]:
    """(TPR, FPR) of a flagged item set against the true DIF items."""
    flagged, truth = set(flagged), set(truth)
    negatives = n_items - len(truth)
    tpr = len(flagged & truth) / len(truth) if truth else float("nan")
    fpr = len(flagged - truth) / negatives if negatives else float("nan")
    return tpr, fpr


def _bias_rmse(est, true) -> tuple[float, float]:
    err = np.asarray(est, dtype=float) - np.asarray(true, dtype=float)
    return float(np.mean(err)), float(np.sqrt(np.mean(err**2)))


@dataclass(frozen=True)
class MetricsReport:
    """Named recovery metrics for one replication or an aggregate.

    Keys follow ``bias_<param>``/``rmse_<param>`` for a, tau, d1, d2 and
    ``bias_nu_k``/``bias_mu_k``/``bias_sigma_k`` for non-reference classes,
    ``auc_k``, ``tpr_uniform_k`` and so on for class k, plus
    ``classification_error`` and the ``oracle_`` counterparts.
    """

    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def classification_error(self) -> float:
        return self.values["classification_error"]

    @property
    def oracle_classification_error(self) -> float:
        return self.values["oracle_classification_error"]

    def by_prefix(self, prefix: str) -> dict:
        return {k: v for k, v in self.values.items() if k.startswith(prefix)}


def evaluate(dataset: SimulatedDataset, fit: FitResult, refit: FitResult,
             grid: QuadratureGrid | None = None) -> MetricsReport:
    """Recovery metrics of a selected model against the generating truth.

    Parameters, posterior and flags come from ``refit`` after label
    alignment; ``fit`` (the penalized solution) only has to agree on K.
    """
    truth = dataset.true_params
    for res in (fit, refit):
        if res.params.n_classes_extra != truth.n_classes_extra:
            raise ContractError(
                f"fit has K={res.params.n_classes_extra}, truth has K={truth.n_classes_extra}")
    if refit.params.n_items != truth.n_items:
        raise ContractError("fit and truth disagree on the number of items")
    al = align(refit.params, truth)
    est = al.params
    post = al.posterior(refit.posterior)
    out = {}
    fin = np.isfinite(truth.thresholds)
    groups = {
        "a": (est.slopes, truth.slopes),
        "tau": (est.thresholds[fin], truth.thresholds[fin]),
        "d1": (est.dif_intercept[:, 1:], truth.dif_intercept[:, 1:]),
        "d2": (est.dif_slope[:, 1:], truth.dif_slope[:, 1:]),
    }
    for name, (e, t) in groups.items():
        out[f"bias_{name}"], out[f"rmse_{name}"] = _bias_rmse(e, t)
    for k in range(1, truth.n_classes):
        for name, e, t in (("nu", est.class_probs, truth.class_probs),
                           ("mu", est.class_means, truth.class_means),
                           ("sigma", est.class_sds, truth.class_sds)):
            out[f"bias_{name}_{k}"], out[f"rmse_{name}_{k}"] = _bias_rmse(e[k], t[k])

    cls = dataset.true_classes
    out["classification_error"] = float(np.mean(post.map_classes() != cls))
    oracle = oracle_posterior(dataset, grid)
    out["oracle_classification_error"] = float(np.mean(oracle.map_classes() != cls))
    p_fit, p_orc = post.class_marginals, oracle.class_marginals
    for k in range(1, truth.n_classes):
        out[f"auc_{k}"] = auc_score(cls == k, p_fit[:, k])
        out[f"oracle_auc_{k}"] = auc_score(cls == k, p_orc[:, k])
        for effect, arr in ((UNIFORM, est.dif_intercept), (NONUNIFORM, est.dif_slope)):
            flagged = np.flatnonzero(arr[:, k] != 0)
            tpr, fpr = detection_rates(flagged, dataset.dif_item_indices, truth.n_items)
            out[f"tpr_{effect}_{k}"], out[f"fpr_{effect}_{k}"] = tpr, fpr
    return MetricsReport(out)


def aggregate(reports) -> MetricsReport:
    """Mean of each metric over replications; RMSE entries are root-mean-squared."""
    reports = list(reports)
    if not reports:
        return MetricsReport({})
    keys = list(reports[0].values)
    out = {}
    for key in keys:
        vals = np.array([r.values.get(key, np.nan) for r in reports], dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            out[key] = float("nan")
        elif key.startswith("rmse_"):
            out[key] = float(np.sqrt(np.mean(vals**2)))
        else:
            out[key] = float(np.mean(vals))
    return MetricsReport(out)


# ----------------------------------------------------------------------------
# replication harness


@dataclass(frozen=True)
class ReplicationRecord:
    rep: int
    seed: int
    metrics: MetricsReport | None
    selected_lambda: float = float("nan")
    converged: bool = False
    error: str | None = None


@dataclass(frozen=True)
class ReplicationStudy:
    config: SimulationConfig
    records: tuple[ReplicationRecord, ...]
    aggregate: MetricsReport

    @property
    def n_failed(self) -> int:
        return sum(r.metrics is None for r in self.records)

    def rows(self):
        """(condition, rep, metric, value) rows in replication order."""
        cond = self.config.condition_name()
        for r in self.records:
            if r.metrics is None:
                continue
            for key, val in r.metrics.values.items():
                yield cond, r.rep, key, val


def run_replication(config: SimulationConfig, rep: int, lambdas=None, grid_spec=(61, 8.0),
                    em_config: EMConfig | None = None) -> ReplicationRecord:
    seed = derive_seed(config.seed, rep)
    try:
        grid = QuadratureGrid.regular(*grid_spec)
        data = generate(config, seed)
        path = run_path(data.responses, config.k_extra, lambdas, grid, em_config)
        sel = path.selected
        metrics = evaluate(data, sel.fit, sel.refit, grid)
        values = dict(metrics.values)
        values["selected_lambda"] = sel.lam
        values["converged"] = float(sel.converged)
        return ReplicationRecord(rep, seed, MetricsReport(values), sel.lam, sel.converged)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.warning("replication %d failed: %s", rep, exc)
        return ReplicationRecord(rep, seed, None, error=f"{type(exc).__name__}: {exc}")


def _worker(args):
    return run_replication(*args)


def worker_count(requested: int | None = None) -> int:
    """Workers for replications: ``requested``, else ``ORDIF_THREADS``, else 1."""
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        requested = int(env) if env else 1
    if requested < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer")
    return requested


def replicate(config: SimulationConfig, lambdas=None, grid_spec=(61, 8.0),
              em_config: EMConfig | None = None, workers: int | None = None) -> ReplicationStudy:
    """Run generate, path selection and evaluation for every replication.

    Replication r uses ``derive_seed(config.seed, r)``, so results do not
    depend on the worker count.  Failed replications are kept as records
    without metrics and left out of the aggregate.
    """
    lambdas = None if lambdas is None else [float(x) for x in lambdas]
    jobs = [(config, r, lambdas, tuple(grid_spec), em_config) for r in range(config.n_reps)]
    n_workers = min(worker_count(workers), len(jobs))
    if n_workers == 1:
        records = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            records = list(pool.map(_worker, jobs))
    records.sort(key=lambda r: r.rep)
    agg = aggregate(r.metrics for r in records if r.metrics is not None)
    if any(r.metrics is None for r in records):
        logger.warning("%d of %d replications failed", sum(r.metrics is None for r in records),
                       len(records))
    return ReplicationStudy(config, tuple(records), agg)


def config_to_dict(config: SimulationConfig) -> dict:
    out = asdict(config)
    out["pi"] = list(np.atleast_1d(config.pi).tolist()) if not np.isscalar(config.pi) else config.pi
    return out


def bias_rmse_ok(report: MetricsReport) -> bool:
    """RMSE >= |bias| for every parameter present in the report."""
    for key, rmse in report.by_prefix("rmse_").items():
        bias = report.get("bias_" + key[5:])
        if bias is not None and not math.isnan(rmse) and rmse + 1e-12 < abs(bias):
            return False
    return True
