"""Command-line interface: ``ordif fit|path|compare-k|simulate|replicate|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .em import fit as em_fit
from .selection import compare_k, confirmatory_refit, degrees_of_freedom, bic, run_path
from .simulation import SimulationConfig, config_to_dict, generate, replicate

logger = logging.getLogger("ordif")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


class ConvergenceError(RuntimeError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--nodes", type=int, help="quadrature nodes G (default 61)")
    p.add_argument("--span", type=float, help="quadrature half-width (default 8)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="output directory (default .)")
    p.add_argument("--max-iters", type=int, help="EM iteration cap")
    p.add_argument("--allow-nonconverged", action="store_true",
                   help="exit 0 even if the reported fit did not converge")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordif",
        description="Latent-class DIF detection for ordinal items with L1-penalized EM.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="one penalized fit plus confirmatory refit")
    _add_common(p)
    p.add_argument("--data", help="response CSV with a header row")
    p.add_argument("--k", type=int, default=None, help="number of non-reference classes K")
    p.add_argument("--lambda", dest="lam", type=float, required=True, help="tuning parameter")

    p = sub.add_parser("path", help="lambda path with BIC selection")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--lambda-grid", help="'default', comma list or logspace:LOW:HIGH:COUNT")

    p = sub.add_parser("compare-k", help="BIC comparison across numbers of classes")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--k", help="comma-separated K candidates (default 0,1,2)")
    p.add_argument("--lambda-grid")

    for name, helptext in (("simulate", "generate one dataset with ground truth"),
                           ("replicate", "simulation study with recovery metrics")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--n", type=int, default=1000, help="respondents")
        p.add_argument("--j", type=int, default=15, help="items")
        p.add_argument("--k", type=int, default=1, help="non-reference classes (1 or 2)")
        p.add_argument("--pi", default=None,
                       help="focal proportion, or comma list of class probabilities")
        p.add_argument("--n-dif-items", type=int, default=None)
        if name == "replicate":
            p.add_argument("--reps", type=int, default=20)
            p.add_argument("--lambda-grid")
            p.add_argument("--workers", type=int, default=None,
                           help="worker processes (default: ORDIF_THREADS or 1)")

    p = sub.add_parser("report", help="item parameter tables from a result JSON")
    p.add_argument("result", help="JSON written by fit or path")
    p.add_argument("--out", help="directory for CSV copies of the tables")
    p.add_argument("--digits", type=int, default=3)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _run_config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if getattr(args, "config", None) else io.RunConfig()
    if getattr(args, "data", None):
        cfg.data_path = args.data
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    g, span = cfg.quadrature
    if getattr(args, "nodes", None) is not None:
        g = args.nodes
    if getattr(args, "span", None) is not None:
        span = args.span
    grid_text = getattr(args, "lambda_grid", None)
    if grid_text:
        cfg.lambda_grid = io.parse_lambda_grid(grid_text)
    if getattr(args, "max_iters", None) is not None:
        cfg.em = {**cfg.em, "max_iters": args.max_iters}
    return io.RunConfig(**{**cfg.to_dict(), "quadrature": (g, span)})


def _out_dir(cfg: io.RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg: io.RunConfig):
    if not cfg.data_path:
        raise ValueError("no data file given (use --data or data_path in --config)")
    return io.read_responses(cfg.data_path)


def _single_k(args, cfg: io.RunConfig) -> int:
    if args.k is not None:
        return args.k
    if len(cfg.k_candidates) == 1:
        return cfg.k_candidates[0]
    raise ValueError("choose K with --k")


def _check_converged(args, *fits) -> None:
    bad = [f for f in fits if not f.converged]
    if bad and not args.allow_nonconverged:
        raise ConvergenceError(f"{len(bad)} fit(s) hit max_iters without meeting the tolerance")


def cmd_fit(args) -> None:
    cfg = _run_config(args)
    data = _load_data(cfg)
    k = _single_k(args, cfg)
    grid, em = cfg.grid(), cfg.em_config()
    pen = em_fit(data, k, args.lam, grid, em)
    refit = confirmatory_refit(data, k, pen.active_set, grid, em, init=pen.params)
    df = degrees_of_freedom(pen.active_set, data, k)
    doc = io.result_document("fit", data.item_names, pen, refit, df=df,
                             bic=bic(refit.loglik, data.n_respondents, df), config=cfg.to_dict())
    out = _out_dir(cfg) / "fit.json"
    io.write_json(out, doc)
    print(f"K={k} lambda={args.lam:g} loglik={refit.loglik:.4f} df={df} bic={doc['bic']:.4f} "
          f"active={len(pen.active_set)} -> {out}")
    _check_converged(args, pen, refit)


def _path_document(data, path, cfg):
    sel = path.selected
    return io.result_document(
        "path", data.item_names, sel.fit, sel.refit, df=sel.df, bic=sel.bic,
        selected_index=path.selected_index, lambdas=path.lambdas.tolist(), bics=path.bics.tolist(),
        config=cfg.to_dict())


def cmd_path(args) -> None:
    cfg = _run_config(args)
    data = _load_data(cfg)
    k = _single_k(args, cfg)
    path = run_path(data, k, cfg.lambdas(), cfg.grid(), cfg.em_config())
    out = _out_dir(cfg)
    io.write_path_csv(out / "path.csv", path)
    io.write_json(out / "selected.json", _path_document(data, path, cfg))
    header = list(io.PATH_COLUMNS)
    rows = [list(r) for r in io.path_rows(path)]
    print(io.format_table(header, rows, digits=4))
    sel = path.selected
    print(f"selected lambda={sel.lam:.3g} (index {path.selected_index}), bic={sel.bic:.4f}")
    _check_converged(args, sel.fit, sel.refit)


def cmd_compare_k(args) -> None:
    cfg = _run_config(args)
    if args.k:
        cfg.k_candidates = [int(x) for x in args.k.split(",") if x.strip()]
    data = _load_data(cfg)
    cmp = compare_k(data, cfg.k_candidates, cfg.lambdas(), cfg.grid(), cfg.em_config())
    out = _out_dir(cfg)
    header = ["k", "n_classes", "lambda", "df", "loglik", "bic", "best"]
    rows = []
    for k, path in sorted(cmp.paths.items()):
        sel = path.selected
        rows.append([k, k + 1, sel.lam, sel.df, sel.refit.loglik, sel.bic, int(k == cmp.best_k)])
        io.write_path_csv(out / f"path_k{k}.csv", path)
    io.write_table_csv(out / "compare_k.csv", header, rows)
    best = cmp.paths[cmp.best_k]
    io.write_json(out / "selected.json", _path_document(data, best, cfg))
    print(io.format_table(header, rows, digits=4))
    print(f"lowest BIC: K={cmp.best_k} ({cmp.best_k + 1} classes)")
    _check_converged(args, best.selected.fit, best.selected.refit)


def _sim_config(args, cfg: io.RunConfig, n_reps: int = 1) -> SimulationConfig:
    kw = dict(n=args.n, j=args.j, k_extra=args.k, seed=cfg.seed, n_reps=n_reps,
              n_dif_items=args.n_dif_items)
    if args.pi is not None:
        vals = tuple(float(x) for x in args.pi.split(","))
        kw["pi"] = vals[0] if len(vals) == 1 else vals
    elif args.k == 2:
        kw["pi"] = (0.5, 0.3, 0.2)
    return SimulationConfig(**kw)


def cmd_simulate(args) -> None:
    cfg = _run_config(args)
    sim = _sim_config(args, cfg)
    ds = generate(sim, cfg.seed)
    out = _out_dir(cfg)
    io.write_responses(out / "responses.csv", ds.responses)
    io.write_json(out / "truth.json", {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "truth",
        "simulation": config_to_dict(sim),
        "seed": cfg.seed,
        "item_names": list(ds.responses.item_names),
        "params": io.params_to_dict(ds.true_params),
        "classes": [int(c) for c in ds.true_classes],
        "thetas": [float(t) for t in ds.true_thetas],
        "dif_items": sorted(int(i) for i in ds.dif_item_indices),
    })
    print(f"wrote {ds.responses.n_respondents} x {ds.responses.n_items} responses to {out}")


def cmd_replicate(args) -> None:
    cfg = _run_config(args)
    sim = _sim_config(args, cfg, n_reps=args.reps)
    lambdas = None if cfg.lambda_grid == "default" else cfg.lambdas()
    study = replicate(sim, lambdas, cfg.quadrature, cfg.em_config(), workers=args.workers)
    out = _out_dir(cfg)
    io.write_metrics_csv(out / "metrics.csv", study.rows())
    io.write_json(out / "aggregate.json", {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "replicate",
        "condition": sim.condition_name(),
        "simulation": config_to_dict(sim),
        "n_reps": sim.n_reps,
        "n_failed": study.n_failed,
        "failures": [{"rep": r.rep, "error": r.error} for r in study.records if r.metrics is None],
        "metrics": study.aggregate.values,
    })
    keys = ["classification_error", "oracle_classification_error", "auc_1", "oracle_auc_1",
            "tpr_uniform_1", "fpr_uniform_1", "bias_nu_1", "rmse_nu_1", "bias_mu_1"]
    rows = [[k, study.aggregate.get(k, float("nan"))] for k in keys]
    print(io.format_table(["metric", "mean"], rows))
    print(f"{sim.n_reps - study.n_failed}/{sim.n_reps} replications succeeded -> {out}")


def cmd_report(args) -> None:
    doc = io.read_json(args.result)
    part = doc.get("refit") or doc.get("fit")
    if part is None:
        raise ValueError(f"{args.result} holds no fitted model")
    params = io.params_from_dict(part["params"])
    names = doc.get("item_names") or [f"item{j + 1}" for j in range(params.n_items)]
    header, rows = io.item_table(params, names)
    cheader, crows = io.class_table(params)
    print("Item parameters (confirmatory refit)" if doc.get("refit") else "Item parameters")
    print(io.format_table(header, rows, args.digits))
    print()
    print(io.format_table(cheader, crows, args.digits))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_table_csv(out / "items.csv", header, rows)
        io.write_table_csv(out / "classes.csv", cheader, crows)


COMMANDS = {
    "fit": cmd_fit,
    "path": cmd_path,
    "compare-k": cmd_compare_k,
    "simulate": cmd_simulate,
    "replicate": cmd_replicate,
    "report": cmd_report,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        COMMANDS[args.command](args)
    except io.IngestionError as exc:
        return _fail("ingestion", str(exc), EXIT_DATA)
    except ConvergenceError as exc:
        return _fail("convergence", str(exc), EXIT_CONVERGENCE)
    except (FileNotFoundError, IsADirectoryError) as exc:
        return _fail("file", str(exc), EXIT_DATA)
    except ValueError as exc:
        return _fail("invalid", str(exc), EXIT_USAGE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
