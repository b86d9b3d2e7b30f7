"""CSV ingestion, JSON/CSV serialization and run configuration."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .em import ActiveEffect, EMConfig, FitResult
from .model import ModelParams, QuadratureGrid, ResponseMatrix
from .selection import RegPath, default_lambda_grid

SCHEMA_VERSION = 1
PATH_COLUMNS = ("lambda", "df", "bic", "loglik", "n_active_uniform", "n_active_nonuniform", "converged")
METRICS_COLUMNS = ("condition", "rep", "metric", "value")


class IngestionError(ValueError):
    """Malformed response data."""


def read_responses(path, n_categories=None) -> ResponseMatrix:
    """Read a comma-separated response file with a header row of item names.

    Rows and columns in error messages are 1-based and count data rows only.
    ``n_categories`` overrides the per-item category counts, which otherwise
    default to the largest observed category.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        if not names or any(not n for n in names):
            raise IngestionError(f"{path}: header row must name every column")
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(names):
                raise IngestionError(f"row {r} has {len(row)} cells, expected {len(names)}")
            vals = []
            for c, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell == "" or cell.upper() in ("NA", "NAN"):
                    raise IngestionError(f"missing value at row {r}, column {c}")
                try:
                    vals.append(int(cell))
                except ValueError:
                    raise IngestionError(f"non-integer value {cell!r} at row {r}, column {c}") from None
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    try:
        return ResponseMatrix(np.array(rows, dtype=np.int64), n_categories, names)
    except ValueError as exc:
        raise IngestionError(str(exc)) from None


def write_responses(path, data: ResponseMatrix) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(data.item_names)
        w.writerows(data.values.tolist())


# ----------------------------------------------------------------------------
# JSON


def _floats(arr) -> list:
    return [float(x) for x in np.ravel(arr)]


def params_to_dict(params: ModelParams) -> dict:
    """Plain-JSON view; thresholds are ragged per item so no infinities appear."""
    return {
        "n_categories": [int(m) for m in params.n_categories],
        "thresholds": [_floats(params.item_thresholds(j)) for j in range(params.n_items)],
        "slopes": _floats(params.slopes),
        "dif_intercept": [_floats(row) for row in params.dif_intercept],
        "dif_slope": [_floats(row) for row in params.dif_slope],
        "class_probs": _floats(params.class_probs),
        "class_means": _floats(params.class_means),
        "class_sds": _floats(params.class_sds),
    }


def params_from_dict(d: dict) -> ModelParams:
    cats = np.asarray(d["n_categories"], dtype=np.int64)
    tau = np.full((cats.size, int(cats.max()) - 1), np.inf)
    for j, t in enumerate(d["thresholds"]):
        tau[j, : len(t)] = t
    return ModelParams(
        thresholds=tau,
        slopes=d["slopes"],
        dif_intercept=d["dif_intercept"],
        dif_slope=d["dif_slope"],
        class_probs=d["class_probs"],
        class_means=d["class_means"],
        class_sds=d["class_sds"],
        n_categories=cats,
    )


def fit_to_dict(res: FitResult) -> dict:
    return {
        "lambda": float(res.lam),
        "params": params_to_dict(res.params),
        "objective": {
            "loglik": res.objective.loglik,
            "penalty": res.objective.penalty,
            "lambda_effective": res.objective.lam,
            "penalized": res.objective.penalized,
        },
        "active_set": [[e.item, e.klass, e.effect] for e in res.active_set],
        "free_effects": None if res.free_effects is None else [[e.item, e.klass, e.effect]
                                                               for e in res.free_effects],
        "converged": bool(res.converged),
        "stalled": bool(res.stalled),
        "n_iters": int(res.n_iters),
        "trace": _floats(res.trace),
    }


def result_document(kind: str, item_names, fit: FitResult | None = None, refit: FitResult | None = None,
                    **extra) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "item_names": list(item_names)}
    if fit is not None:
        doc["n_classes_extra"] = fit.params.n_classes_extra
        doc["fit"] = fit_to_dict(fit)
    if refit is not None:
        doc["refit"] = fit_to_dict(refit)
    doc.update(extra)
    return doc


def _finite_or_none(obj):
    # JSON has no inf/nan; map them to null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite_or_none(obj.item())
    return obj


def write_json(path, doc: dict) -> None:
    """Write ``doc`` as JSON; floats use the shortest exact round-trip form."""
    Path(path).write_text(json.dumps(_finite_or_none(doc), indent=2, allow_nan=False) + "\n",
                          encoding="utf-8")


def read_json(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    return doc


def active_from_list(rows) -> tuple[ActiveEffect, ...]:
    return tuple(ActiveEffect(int(i), int(k), str(t)) for i, k, t in rows)


# ----------------------------------------------------------------------------
# CSV tables


def path_rows(path: RegPath):
    for e in path.entries:
        yield (e.lam, e.df, e.bic, e.refit.loglik, e.n_active_uniform, e.n_active_nonuniform,
               int(e.converged))


def write_path_csv(out, path: RegPath) -> None:
    with Path(out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PATH_COLUMNS)
        for row in path_rows(path):
            w.writerow([repr(float(row[0])), row[1], repr(float(row[2])), repr(float(row[3])), *row[4:]])


def write_metrics_csv(out, rows) -> None:
    """Write (condition, rep, metric, value) rows."""
    with Path(out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for cond, rep, metric, value in rows:
            w.writerow([cond, rep, metric, repr(float(value))])


def read_metrics_csv(path) -> list[tuple[str, int, str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(METRICS_COLUMNS)}")
        return [(r["condition"], int(r["rep"]), r["metric"], float(r["value"])) for r in reader]


def item_table(params: ModelParams, item_names) -> tuple[list[str], list[list]]:
    """Per-item rows: slope, DIF per non-reference class, then thresholds."""
    kp1 = params.n_classes
    mmax = params.thresholds.shape[1]
    header = ["item", "a"]
    for k in range(1, kp1):
        header += [f"d1_class{k}", f"d2_class{k}"]
    header += [f"tau{m + 1}" for m in range(mmax)]
    rows = []
    for j in range(params.n_items):
        row = [item_names[j], float(params.slopes[j])]
        for k in range(1, kp1):
            row += [float(params.dif_intercept[j, k]), float(params.dif_slope[j, k])]
        tau = params.item_thresholds(j)
        row += [float(t) for t in tau] + [None] * (mmax - tau.size)
        rows.append(row)
    return header, rows


def class_table(params: ModelParams) -> tuple[list[str], list[list]]:
    header = ["class", "proportion", "mean", "sd"]
    rows = [[k, float(params.class_probs[k]), float(params.class_means[k]), float(params.class_sds[k])]
            for k in range(params.n_classes)]
    return header, rows


def format_table(header, rows, digits: int = 3) -> str:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.{digits}f}"
        return str(v)

    body = [[cell(v) for v in r] for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in body)) if body else len(str(h))
              for i, h in enumerate(header)]
    lines = ["  ".join(str(h).rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def write_table_csv(out, header, rows) -> None:
    with Path(out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])


# ----------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Settings shared by the CLI subcommands, loadable from a JSON file."""

    data_path: str | None = None
    k_candidates: list = field(default_factory=lambda: [0, 1, 2])
    lambda_grid: list | str = "default"
    quadrature: tuple = (61, 8.0)
    em: dict = field(default_factory=dict)
    output_dir: str = "."
    seed: int = 0

    def __post_init__(self):
        if self.data_path is not None and not str(self.data_path):
            raise ValueError("data_path must be non-empty")
        if not self.output_dir:
            raise ValueError("output_dir must be non-empty")
        self.k_candidates = [int(k) for k in self.k_candidates]
        if not self.k_candidates or min(self.k_candidates) < 0:
            raise ValueError("k_candidates must be a non-empty list of non-negative integers")
        g, span = self.quadrature
        self.quadrature = (int(g), float(span))
        if self.quadrature[0] < 11:
            raise ValueError("quadrature needs at least 11 nodes")
        if self.quadrature[1] <= 0:
            raise ValueError("quadrature span must be positive")
        if self.lambda_grid != "default":
            self.lambda_grid = [float(x) for x in self.lambda_grid]
        known = {f.name for f in fields(EMConfig)}
        unknown = set(self.em) - known
        if unknown:
            raise ValueError(f"unknown EM settings: {sorted(unknown)}")
        self.em_config()

    def lambdas(self) -> np.ndarray:
        if self.lambda_grid == "default":
            return default_lambda_grid()
        return np.asarray(self.lambda_grid, dtype=float)

    def grid(self) -> QuadratureGrid:
        return QuadratureGrid.regular(*self.quadrature)

    def em_config(self) -> EMConfig:
        return EMConfig(**{"seed": self.seed, **self.em})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quadrature"] = list(self.quadrature)
        return d


def load_config(path) -> RunConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    return RunConfig(**doc)


def parse_lambda_grid(text: str):
    """``default``, a comma list, or ``logspace:LOW:HIGH:COUNT`` (log10 bounds)."""
    text = text.strip()
    if text == "default":
        return "default"
    if text.startswith("logspace:"):
        try:
            _, lo, hi, n = text.split(":")
            return np.logspace(float(lo), float(hi), int(n)).tolist()
        except ValueError:
            raise ValueError(f"bad lambda grid {text!r}; use logspace:LOW:HIGH:COUNT") from None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValueError(f"bad lambda grid {text!r}") from None
