"""Regularization path over a lambda grid, BIC selection and confirmatory refits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .em import NONUNIFORM, UNIFORM, ActiveEffect, EMConfig, FitResult, fit
from .model import ModelParams, QuadratureGrid, ResponseMatrix

logger = logging.getLogger(__name__)


def default_lambda_grid(n_values: int = 10, low: float = -6.0, high: float = -2.0) -> np.ndarray:
    """Log-equally spaced tuning parameters from 10**low to 10**high."""
    if n_values < 1:
        raise ValueError("n_values must be positive")
    return np.logspace(low, high, n_values)


def degrees_of_freedom(active, data: ResponseMatrix, n_classes_extra: int) -> int:
    """Free parameters: thresholds, slopes, active DIF effects and K * (nu, mu, sigma)."""
    active = [ActiveEffect(*e) for e in active]
    for e in active:
        if not (0 <= e.item < data.n_items and 1 <= e.klass <= n_classes_extra):
            raise ValueError(f"active effect {e} is inconsistent with J={data.n_items}, K={n_classes_extra}")
        if e.effect not in (UNIFORM, NONUNIFORM):
            raise ValueError(f"unknown effect type {e.effect!r}")
    n_thresholds = int(np.sum(data.n_categories - 1))
    return n_thresholds + data.n_items + len(set(active)) + 3 * n_classes_extra


def bic(loglik: float, n: int, df: int) -> float:
    if n < 1:
        raise ValueError("n must be at least 1")
    return -2.0 * loglik + math.log(n) * df


def confirmatory_refit(data: ResponseMatrix, n_classes_extra: int, active, grid: QuadratureGrid,
                       config: EMConfig | None = None, init: ModelParams | None = None) -> FitResult:
    """Unpenalized fit with every effect outside ``active`` pinned at zero.

    ``init`` (typically the penalized solution) warm-starts the refit.
    """
    active = tuple(ActiveEffect(*e) for e in active)
    return fit(data, n_classes_extra, 0.0, grid, config, init=init, free_effects=active)


@dataclass(frozen=True, eq=False)
class PathEntry:
    lam: float
    fit: FitResult
    refit: FitResult
    df: int
    bic: float

    @property
    def n_active_uniform(self) -> int:
        return sum(e.effect == UNIFORM for e in self.refit.free_effects or ())

    @property
    def n_active_nonuniform(self) -> int:
        return sum(e.effect == NONUNIFORM for e in self.refit.free_effects or ())

    @property
    def converged(self) -> bool:
        return self.fit.converged and self.refit.converged


@dataclass(frozen=True, eq=False)
class RegPath:
    entries: tuple[PathEntry, ...]
    selected_index: int
    n_classes_extra: int

    @property
    def selected(self) -> PathEntry:
        return self.entries[self.selected_index]

    @property
    def bics(self) -> np.ndarray:
        return np.array([e.bic for e in self.entries])

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])


def select_index(bics) -> int:
    """First index attaining the minimum BIC."""
    bics = np.asarray(bics, dtype=float)
    if bics.size == 0:
        raise ValueError("empty path")
    return int(np.flatnonzero(bics == bics.min())[0])


def run_path(data: ResponseMatrix, n_classes_extra: int, lambdas=None, grid: QuadratureGrid | None = None,
             config: EMConfig | None = None, warm_start: bool = True) -> RegPath:
    """Penalized fits along ascending lambdas, each followed by a confirmatory refit.

    Each penalized fit starts from the previous lambda's solution when
    ``warm_start`` is set.  BIC uses the refit log-likelihood and the size of
    the penalized active set.  With K = 0 there are no DIF parameters, so a
    single fit serves every grid point.
    """
    lambdas = default_lambda_grid() if lambdas is None else np.asarray(lambdas, dtype=float)
    if lambdas.ndim != 1 or lambdas.size == 0:
        raise ValueError("lambda grid must be a non-empty 1-d sequence")
    if np.any(lambdas < 0) or np.any(np.diff(lambdas) <= 0):
        raise ValueError("lambda grid must be non-negative and strictly increasing")
    grid = QuadratureGrid.regular() if grid is None else grid
    config = EMConfig() if config is None else config
    n = data.n_respondents
    entries = []
    if n_classes_extra == 0:
        base = fit(data, 0, 0.0, grid, config, free_effects=())
        df = degrees_of_freedom((), data, 0)
        value = bic(base.loglik, n, df)
        entries = [PathEntry(float(lam), base, base, df, value) for lam in lambdas]
        return RegPath(tuple(entries), 0, 0)
    init = None
    for lam in lambdas:
        pen = fit(data, n_classes_extra, float(lam), grid, config, init=init)
        refit = confirmatory_refit(data, n_classes_extra, pen.active_set, grid, config, init=pen.params)
        df = degrees_of_freedom(pen.active_set, data, n_classes_extra)
        entries.append(PathEntry(float(lam), pen, refit, df, bic(refit.loglik, n, df)))
        if not (pen.converged and refit.converged):
            logger.warning("lambda=%g did not converge (penalized=%s, refit=%s)", lam,
                           pen.converged, refit.converged)
        if warm_start:
            init = pen.params
    return RegPath(tuple(entries), select_index([e.bic for e in entries]), n_classes_extra)


@dataclass(frozen=True, eq=False)
class KComparison:
    paths: dict

    @property
    def table(self) -> list[tuple[int, float, float]]:
        """(K, selected lambda, selected BIC) per candidate."""
        return [(k, p.selected.lam, p.selected.bic) for k, p in sorted(self.paths.items())]

    @property
    def best_k(self) -> int:
        rows = self.table
        return rows[select_index([r[2] for r in rows])][0]


def compare_k(data: ResponseMatrix, k_candidates, lambdas=None, grid: QuadratureGrid | None = None,
              config: EMConfig | None = None) -> KComparison:
    """Run a path per candidate K and compare the selected models' BIC."""
    ks = sorted({int(k) for k in k_candidates})
    if not ks:
        raise ValueError("no K candidates given")
    return KComparison({k: run_path(data, k, lambdas, grid, config) for k in ks})
