"""Command line entry point: ``fiemf <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .dataset import (DatasetError, load_rt_matrix, load_user_regions, split, write_triplets)
from .metrics import mae, rmse
from .model import CheckpointError, FiemfHyperparams, TrainingError, train
from .region import build_region_model

_logger = logging.getLogger("fiemf")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _add_data_args(p, users=True):
    p.add_argument("--rt", help="rtMatrix text file")
    if users:
        p.add_argument("--users", help="tab-separated user list with region column")
    p.add_argument("--id-column", help="user id column name in the user list")
    p.add_argument("--country-column", help="country column name in the user list")


def _add_hyper_args(p):
    g = p.add_argument_group("FIEMF hyperparameters")
    g.add_argument("--alpha", type=float)
    g.add_argument("--lam", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--dim", type=int)
    g.add_argument("-k", "--k", type=int, dest="k", help="neighbor count")
    g.add_argument("--eta", type=float)
    g.add_argument("--eta-decay", type=float)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--reg-mode", choices=["objective", "entry"])
    g.add_argument("--cross-terms", action="store_true", default=None)
    g.add_argument("--r-med-mode", choices=["user", "global"])
    g.add_argument("--pair-cap", type=int)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's defaults from clobbering flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML experiment config; flags override it")
    common.add_argument("--seed", type=int, help="split / initialization seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fiemf", parents=[common],
                                     description="FIEMF QoS prediction and benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="validate dataset files and print stats")
    _add_data_args(p)

    p = sub.add_parser("split", parents=[common], help="write a train/test split as triplet CSVs")
    _add_data_args(p, users=False)
    p.add_argument("--density", type=float, required=True)

    p = sub.add_parser("neighbors", parents=[common], help="compute and cache FIE neighbor sets")
    _add_data_args(p, users=False)
    p.add_argument("--density", type=float, required=True)
    p.add_argument("-k", "--k", type=int, dest="k")
    p.add_argument("--r-med-mode", choices=["user", "global"])
    p.add_argument("--pair-cap", type=int)

    p = sub.add_parser("train", parents=[common], help="train FIEMF on one split and save a checkpoint")
    _add_data_args(p)
    p.add_argument("--density", type=float, required=True)
    _add_hyper_args(p)

    p = sub.add_parser("evaluate", parents=[common], help="run (method, density, seed) cells")
    _add_data_args(p)
    p.add_argument("--methods", help=f"comma list from {','.join(harness.ALL_METHODS)}")
    p.add_argument("--density", "--densities", dest="densities", help="comma list of densities")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--workers", type=int)
    _add_hyper_args(p)

    p = sub.add_parser("sweep", parents=[common], help="FIEMF parameter sweep")
    _add_data_args(p)
    p.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma list of values")
    p.add_argument("--density", type=float)
    p.add_argument("--seeds", help="comma list of seeds")
    _add_hyper_args(p)

    p = sub.add_parser("report", parents=[common], help="merge report.csv files into a comparison table")
    p.add_argument("inputs", nargs="+", help="report.csv files")
    p.add_argument("--table", default="table.csv", help="output file name inside --out")
    return parser


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_file(args.config) if args.config else harness.ExperimentConfig()
    updates = {}
    for attr, key in (("rt", "rt_path"), ("users", "users_path"), ("id_column", "id_column"),
                      ("country_column", "country_column"), ("out", "output_dir"),
                      ("workers", "workers")):
        val = getattr(args, attr, None)
        if val is not None:
            updates[key] = val
    if getattr(args, "methods", None):
        updates["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "densities", None):
        updates["densities"] = _floats(args.densities)
    if getattr(args, "seeds", None):
        updates["seeds"] = _ints(args.seeds)
    elif args.seed is not None:
        updates["seeds"] = [args.seed]
    hyper = {k: getattr(args, k, None) for k in ("alpha", "lam", "gamma", "dim", "k", "eta",
                                                 "max_iters", "reg_mode", "cross_terms")}
    hyper["eta_decay"] = getattr(args, "eta_decay", None)
    hyper = {k: v for k, v in hyper.items() if v is not None}
    if hyper:
        updates["fiemf"] = replace(cfg.fiemf, **hyper)
    sim = {k: getattr(args, k, None) for k in ("r_med_mode", "pair_cap")}
    sim = {k: v for k, v in sim.items() if v is not None}
    if sim:
        updates["similarity"] = replace(cfg.similarity, **sim)
    cfg = replace(cfg, **updates)
    if cfg.cache_dir is None:
        cfg = replace(cfg, cache_dir=str(Path(cfg.output_dir) / "cache"))
    return cfg


def _require_rt(cfg):
    if not cfg.rt_path:
        raise DatasetError("--rt (or rt_path in the config) is required")


def cmd_prepare(args) -> int:
    cfg = _config(args)
    _require_rt(cfg)
    matrix = load_rt_matrix(cfg.rt_path)
    cells = matrix.num_users * matrix.num_services
    print(f"{matrix.num_users} users, {matrix.num_services} services, {cells} records")
    lo, hi = matrix.value_range
    print(f"observed {len(matrix)} valid entries ({cells - len(matrix)} missing), "
          f"range [{lo:g}, {hi:g}], mean {matrix.global_mean:.4f}")
    if cfg.users_path:
        regions = load_user_regions(cfg.users_path, cfg.id_column, cfg.country_column)
        if regions.num_users != matrix.num_users:
            raise DatasetError(f"user list covers {regions.num_users} users, matrix has {matrix.num_users}")
        print(f"{len(regions.regions)} regions")
    return 0


def _one_split(cfg, args):
    _require_rt(cfg)
    matrix = load_rt_matrix(cfg.rt_path)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return matrix, split(matrix, args.density, seed)


def cmd_split(args) -> int:
    cfg = _config(args)
    _, sp = _one_split(cfg, args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"d{sp.density:g}_s{sp.seed}"
    write_triplets(sp.train, out / f"train_{tag}.csv")
    write_triplets(sp.test, out / f"test_{tag}.csv")
    print(f"train {len(sp.train)} / test {len(sp.test)} entries -> {out}")
    return 0


def cmd_neighbors(args) -> int:
    cfg = _config(args)
    _, sp = _one_split(cfg, args)
    k = args.k if args.k is not None else cfg.fiemf.k
    cache = harness.NeighborCache(cfg.cache_dir)
    table = cache.get(sp.train, sp.source_fingerprint, sp.density, sp.seed, cfg.similarity, k)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"neighbors_d{sp.density:g}_s{sp.seed}_k{k}.csv"
    table.write_csv(path)
    empty = sum(1 for ns in table.sets if not ns.neighbors)
    print(f"{table.num_users} users, K={k}, {empty} without neighbors -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if not cfg.users_path:
        raise DatasetError("--users is required for FIEMF region means")
    matrix, sp = _one_split(cfg, args)
    regions = load_user_regions(cfg.users_path, cfg.id_column, cfg.country_column)
    hyper: FiemfHyperparams = replace(cfg.fiemf, init_seed=cfg.fiemf.init_seed + sp.seed)
    cache = harness.NeighborCache(cfg.cache_dir)
    neighbors = cache.get(sp.train, sp.source_fingerprint, sp.density, sp.seed, cfg.similarity, hyper.k)
    model = train(sp.train, neighbors, build_region_model(sp.train, regions, cfg.region_include_self),
                  hyper, log_every=10 if args.verbose else 0)
    pred = model.predict_matrix(sp.test)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"fiemf_d{sp.density:g}_s{sp.seed}.npz"
    model.save(path)
    print(f"epochs {model.trace.epochs}  MAE {mae(sp.test.values, pred):.4f}  "
          f"RMSE {rmse(sp.test.values, pred):.4f}  -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    _require_rt(cfg)
    report = harness.run_experiment(cfg)
    for agg in report.aggregates():
        ref = agg["paper_mae"]
        ref_txt = f"  (published {ref:.4f})" if ref is not None else ""
        print(f"{agg['method']:9s} d={agg['density']:.2f}  MAE {agg['mae_mean']:.4f}±{agg['mae_std']:.4f}  "
              f"RMSE {agg['rmse_mean']:.4f}±{agg['rmse_std']:.4f}{ref_txt}")
    failed = [c for c in report.cells if c.status != "ok"]
    for c in failed:
        print(f"FAILED {c.method} d={c.density} seed={c.seed}: {c.error}", file=sys.stderr)
    print(f"report written to {cfg.output_dir}")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    _require_rt(cfg)
    rows = harness.sweep(args.param, _floats(args.values), cfg, density=args.density)
    for r in rows:
        print(f"{r['param']}={r['value']:g}  MAE {r['mae']:.4f}  RMSE {r['rmse']:.4f}")
    return 0


def cmd_report(args) -> int:
    cells = harness.read_report_cells(args.inputs)
    rows = harness.comparison_table(cells)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / args.table
    harness.write_comparison(rows, path)
    for row in rows:
        print(",".join(row))
    return 0


COMMANDS = {"prepare": cmd_prepare, "split": cmd_split, "neighbors": cmd_neighbors,
            "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DatasetError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"fiemf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
