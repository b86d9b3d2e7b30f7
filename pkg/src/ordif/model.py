"""Parameter/data containers and the proportional-odds response kernel.

Cumulative probabilities follow

    logit P(Y_ij <= m | theta, class k) = tau_jm - (a_j + d2_jk) * theta + d1_jk

with class 0 the reference (d1_j0 = d2_j0 = 0, mean 0, SD 1).  Items may have
different numbers of categories; thresholds are stored in a J x (M_max - 1)
array padded with ``+inf`` so that unused categories get probability zero and
every kernel can be evaluated with array broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

GAP_EPS = 1e-3
SLOPE_EPS = 1e-3
SD_FLOOR = 0.1
PROB_CLAMP = 1e-12


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def one_hot(values: np.ndarray, max_categories: int) -> np.ndarray:
    """Indicator encoding of 1-based responses, column j * M_max + (y - 1)."""
    values = np.atleast_2d(values)
    n, j = values.shape
    out = np.zeros((n, j * max_categories))
    cols = np.arange(j) * max_categories + (values - 1)
    out[np.arange(n)[:, None], cols] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """N x J matrix of ordinal responses coded 1..M_j.

    Parameters
    ----------
    values : array_like of int
        Response matrix, one row per respondent.
    n_categories : sequence of int, optional
        Number of categories per item.  Defaults to the column maxima.
    item_names : sequence of str, optional
        Column labels carried into reports.
    """

    values: np.ndarray
    n_categories: np.ndarray
    item_names: tuple[str, ...]

    def __init__(self, values, n_categories=None, item_names=None):
        vals = np.asarray(values)
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] < 1:
            raise ValueError("responses must be a non-empty 2-D array")
        if not np.issubdtype(vals.dtype, np.integer):
            if not np.all(np.isfinite(vals)):
                raise ValueError("responses contain missing or non-finite entries")
            if np.any(vals != np.round(vals)):
                raise ValueError("responses must be integers")
        vals = vals.astype(np.int64)
        if n_categories is None:
            n_categories = vals.max(axis=0)
        cats = np.asarray(n_categories, dtype=np.int64)
        if cats.shape != (vals.shape[1],):
            raise ValueError("n_categories must have one entry per item")
        for j in range(vals.shape[1]):
            col = vals[:, j]
            if col.min() < 1:
                r = int(np.argmin(col))
                raise ValueError(f"category below 1 at row {r + 1}, column {j + 1}")
            if col.max() > cats[j]:
                r = int(np.argmax(col))
                raise ValueError(f"category above {cats[j]} at row {r + 1}, column {j + 1}")
            if np.unique(col).size < 2:
                raise ValueError(f"degenerate item: column {j + 1} has a single observed category")
        if np.any(cats < 2):
            raise ValueError("every item needs at least 2 categories")
        if item_names is None:
            item_names = [f"item{j + 1}" for j in range(vals.shape[1])]
        if len(item_names) != vals.shape[1]:
            raise ValueError("item_names must have one entry per item")
        object.__setattr__(self, "values", _frozen(vals, np.int64))
        object.__setattr__(self, "n_categories", _frozen(cats, np.int64))
        object.__setattr__(self, "item_names", tuple(str(n) for n in item_names))

    @property
    def n_respondents(self) -> int:
        return self.values.shape[0]

    @property
    def n_items(self) -> int:
        return self.values.shape[1]

    @property
    def max_categories(self) -> int:
        return int(self.n_categories.max())

    def one_hot(self) -> np.ndarray:
        """N x (J * M_max) indicator matrix, item-major."""
        return one_hot(self.values, self.max_categories)

    def take(self, rows) -> "ResponseMatrix":
        return ResponseMatrix(self.values[rows], self.n_categories, self.item_names)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter set of the mixture proportional-odds model.

    Arrays are copied and made read-only on construction.  ``thresholds`` is
    J x (M_max - 1) with ``+inf`` beyond each item's last threshold.
    """

    thresholds: np.ndarray
    slopes: np.ndarray
    dif_intercept: np.ndarray
    dif_slope: np.ndarray
    class_probs: np.ndarray
    class_means: np.ndarray
    class_sds: np.ndarray
    n_categories: np.ndarray = field(default=None)

    def __post_init__(self):
        tau = np.array(self.thresholds, dtype=float)
        if tau.ndim != 2:
            raise ValueError("thresholds must be 2-D (items x thresholds)")
        cats = self.n_categories
        if cats is None:
            cats = np.isfinite(tau).sum(axis=1) + 1
        cats = np.asarray(cats, dtype=np.int64)
        for j, mj in enumerate(cats):
            tau[j, mj - 1:] = np.inf
        object.__setattr__(self, "thresholds", _frozen(tau))
        object.__setattr__(self, "n_categories", _frozen(cats, np.int64))
        for name in ("slopes", "class_probs", "class_means", "class_sds"):
            object.__setattr__(self, name, _frozen(np.ravel(getattr(self, name))))
        for name in ("dif_intercept", "dif_slope"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be items x classes")
            object.__setattr__(self, name, _frozen(arr))
        j, kp1 = self.n_items, self.class_probs.size
        shapes = {
            "slopes": (self.slopes.shape, (j,)),
            "dif_intercept": (self.dif_intercept.shape, (j, kp1)),
            "dif_slope": (self.dif_slope.shape, (j, kp1)),
            "class_means": (self.class_means.shape, (kp1,)),
            "class_sds": (self.class_sds.shape, (kp1,)),
            "n_categories": (self.n_categories.shape, (j,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")

    @property
    def n_items(self) -> int:
        return self.thresholds.shape[0]

    @property
    def n_classes_extra(self) -> int:
        return self.class_probs.size - 1

    @property
    def n_classes(self) -> int:
        return self.class_probs.size

    def item_thresholds(self, item: int) -> np.ndarray:
        return self.thresholds[item, : self.n_categories[item] - 1]

    def effective_slopes(self) -> np.ndarray:
        """J x (K+1) matrix of a_j + d2_jk."""
        return self.slopes[:, None] + self.dif_slope

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)


def make_params(
    thresholds: Sequence[Sequence[float]],
    slopes,
    dif_intercept=None,
    dif_slope=None,
    class_probs=(1.0,),
    class_means=None,
    class_sds=None,
) -> ModelParams:
    """Build :class:`ModelParams` from ragged per-item threshold lists."""
    cats = np.array([len(t) + 1 for t in thresholds])
    tau = np.full((len(thresholds), cats.max() - 1), np.inf)
    for j, t in enumerate(thresholds):
        tau[j, : len(t)] = t
    kp1 = len(class_probs)
    nj = len(thresholds)
    return ModelParams(
        thresholds=tau,
        slopes=slopes,
        dif_intercept=np.zeros((nj, kp1)) if dif_intercept is None else dif_intercept,
        dif_slope=np.zeros((nj, kp1)) if dif_slope is None else dif_slope,
        class_probs=class_probs,
        class_means=np.zeros(kp1) if class_means is None else class_means,
        class_sds=np.ones(kp1) if class_sds is None else class_sds,
        n_categories=cats,
    )


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Equally spaced latent-trait nodes with rectangle-rule weights.

    The E-step multiplies each weight by the class density at the node, so the
    weights are plain interval widths rather than Gauss-Hermite weights.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = _frozen(np.ravel(self.nodes))
        weights = _frozen(np.ravel(self.weights))
        if nodes.shape != weights.shape or nodes.size < 1:
            raise ValueError("nodes and weights must be non-empty and equal length")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("quadrature nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def regular(cls, n_nodes: int = 61, span: float = 8.0, check: bool = True) -> "QuadratureGrid":
        if n_nodes < 2:
            raise ValueError("need at least two nodes")
        nodes = np.linspace(-span, span, n_nodes)
        grid = cls(nodes, np.full(n_nodes, nodes[1] - nodes[0]))
        if check:
            grid.check_coverage()
        return grid

    @property
    def size(self) -> int:
        return self.nodes.size

    def mass(self, mean: float, sd: float) -> float:
        return float(np.sum(self.weights * norm.pdf(self.nodes, mean, sd)))

    def check_coverage(self, means=(-3.0, 3.0), sds=(0.5, 1.5), tol=1e-3) -> None:
        """Raise if the grid loses more than ``tol`` normal mass on the box."""
        for mu in np.linspace(means[0], means[1], 13):
            for sd in np.linspace(sds[0], sds[1], 11):
                m = self.mass(mu, sd)
                if abs(m - 1.0) > tol:
                    raise ValueError(
                        f"quadrature grid integrates N({mu:.2f}, {sd:.2f}^2) to {m:.6f}; "
                        "widen the span or add nodes"
                    )


def _check_index(params: ModelParams, item: int, klass: int) -> None:
    if not 0 <= item < params.n_items:
        raise IndexError(f"item index {item} out of range for {params.n_items} items")
    if not 0 <= klass < params.n_classes:
        raise IndexError(f"class index {klass} out of range for K = {params.n_classes_extra}")


def cumulative_prob(params: ModelParams, item: int, klass: int, theta: float) -> np.ndarray:
    """P(Y <= m) for m = 1..M_j - 1."""
    _check_index(params, item, klass)
    slope = params.slopes[item] + params.dif_slope[item, klass]
    eta = params.item_thresholds(item) - slope * theta + params.dif_intercept[item, klass]
    return expit(eta)


def _difference(cum: np.ndarray) -> np.ndarray:
    # cum[..., m] is P(Y <= m+1); pad with 0 below and 1 above
    lead = np.zeros(cum.shape[:-1] + (1,))
    tail = np.ones(cum.shape[:-1] + (1,))
    full = np.concatenate([lead, cum, tail], axis=-1)
    return np.diff(full, axis=-1)


def category_prob(params: ModelParams, item: int, klass: int, theta: float) -> np.ndarray:
    """P(Y = m) for m = 1..M_j."""
    return _difference(cumulative_prob(params, item, klass, theta))


def kernel_tables(params: ModelParams, nodes: np.ndarray):
    """Evaluate the response kernel on every (item, class, node).

    Returns
    -------
    prob : ndarray, shape (J, K+1, G, M_max)
        Category probabilities (unclamped).
    dens : ndarray, shape (J, K+1, G, M_max - 1)
        Logistic densities F(1 - F) at each threshold.
    """
    nodes = np.asarray(nodes, dtype=float)
    slope = params.effective_slopes()
    eta = (
        params.thresholds[:, None, None, :]
        - slope[:, :, None, None] * nodes[None, None, :, None]
        + params.dif_intercept[:, :, None, None]
    )
    cum = expit(eta)
    prob = _difference(cum)
    dens = cum * (1.0 - cum)
    return prob, dens


def log_prob_table(params: ModelParams, nodes: np.ndarray) -> np.ndarray:
    """Clamped log category probabilities, shape (J, K+1, G, M_max)."""
    prob, _ = kernel_tables(params, nodes)
    return np.log(np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP))


@dataclass(frozen=True)
class Violation:
    rule: str
    item: int | None = None
    klass: int | None = None
    index: int | None = None

    def __str__(self) -> str:
        loc = []
        if self.item is not None:
            loc.append(f"item {self.item}")
        if self.klass is not None:
            loc.append(f"class {self.klass}")
        if self.index is not None:
            loc.append(f"index {self.index}")
        return self.rule + (", " + ", ".join(loc) if loc else "")


def validate(params: ModelParams, gap_eps: float = GAP_EPS, slope_eps: float = SLOPE_EPS,
             atol: float = 1e-12) -> list[Violation]:
    """Return every violated identification or feasibility constraint.

    An empty list means the parameters are valid.
    """
    out: list[Violation] = []
    for j in range(params.n_items):
        tau = params.item_thresholds(j)
        if not np.all(np.isfinite(tau)):
            out.append(Violation("non-finite threshold", item=j))
            continue
        for m in np.flatnonzero(np.diff(tau) < gap_eps - atol):
            out.append(Violation("threshold ordering", item=j, index=int(m) + 1))
    for j in np.flatnonzero(~(params.slopes >= slope_eps - atol)):
        out.append(Violation("slope floor", item=int(j)))
    eff = params.effective_slopes()
    for j, k in zip(*np.nonzero(~(eff >= slope_eps - atol))):
        if k > 0:
            out.append(Violation("combined slope floor", item=int(j), klass=int(k)))
    for j in np.flatnonzero(params.dif_intercept[:, 0] != 0):
        out.append(Violation("reference uniform DIF not zero", item=int(j), klass=0))
    for j in np.flatnonzero(params.dif_slope[:, 0] != 0):
        out.append(Violation("reference non-uniform DIF not zero", item=int(j), klass=0))
    if params.class_means[0] != 0.0:
        out.append(Violation("reference mean not zero", klass=0))
    if params.class_sds[0] != 1.0:
        out.append(Violation("reference SD not one", klass=0))
    for k in np.flatnonzero(~(params.class_sds > 0)):
        out.append(Violation("non-positive SD", klass=int(k)))
    nu = params.class_probs
    if np.any(nu < 0) or abs(nu.sum() - 1.0) > 1e-9:
        out.append(Violation("simplex"))
    for name in ("slopes", "dif_intercept", "dif_slope", "class_means", "class_sds", "class_probs"):
        if not np.all(np.isfinite(getattr(params, name))):
            out.append(Violation(f"non-finite {name}"))
    return out
