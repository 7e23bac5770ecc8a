"""Experiment runner: density protocol, multi-seed evaluation, sweeps and reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .baselines import UIPCC, MeanModel, MFConfig, UipccConfig, biasedmf_train, pmf_train
from .dataset import (DEFAULT_COUNTRY_COLUMN, DEFAULT_ID_COLUMN, QosMatrix, UserRegionTable,
                      load_rt_matrix, load_user_regions, split)
from .metrics import mae, rmse
from .model import FiemfHyperparams, TrainingError, train
from .region import build_region_model
from .similarity import NeighborTable, SimilarityConfig, compute_neighbors

_logger = logging.getLogger(__name__)

ALL_METHODS = ("umean", "imean", "uipcc", "pmf", "biasedmf", "fiemf")
PAPER_DENSITIES = (0.05, 0.10, 0.15, 0.20)

# Published accuracy at densities 5/10/15/20 %; NIMF and NBMF are reference-only.
PAPER_TABLE = {
    "umean": {"mae": (0.8816, 0.8776, 0.8743, 0.8734), "rmse": (1.8573, 1.8558, 1.8558, 1.8579)},
    "imean": {"mae": (0.7036, 0.6888, 0.6848, 0.6799), "rmse": (1.5722, 1.5382, 1.5312, 1.5297)},
    "uipcc": {"mae": (0.6398, 0.5360, 0.4876, 0.4608), "rmse": (1.4742, 1.3461, 1.2704, 1.2216)},
    "pmf": {"mae": (0.5686, 0.4861, 0.4512, 0.4306), "rmse": (1.5373, 1.3143, 1.2197, 1.1695)},
    "biasedmf": {"mae": (0.5947, 0.5124, 0.4777, 0.4559), "rmse": (1.3822, 1.2602, 1.2086, 1.1782)},
    "nimf": {"mae": (0.5455, 0.4817, 0.4503, 0.4287), "rmse": (1.4659, 1.2858, 1.2088, 1.1650)},
    "nbmf": {"mae": (0.5265, 0.4827, 0.4618, 0.4488), "rmse": (1.4255, 1.2721, 1.2235, 1.1905)},
    "fiemf": {"mae": (0.5326, 0.4752, 0.4470, 0.4302), "rmse": (1.4079, 1.2560, 1.1893, 1.1544)},
}
TABLE_ORDER = ("umean", "imean", "uipcc", "pmf", "biasedmf", "nimf", "nbmf", "fiemf")
DISPLAY_NAMES = {"umean": "UMEAN", "imean": "IMEAN", "uipcc": "UIPCC", "pmf": "PMF",
                 "biasedmf": "BiasedMF", "nimf": "NIMF", "nbmf": "NBMF", "fiemf": "FIEMF"}

SWEEP_PARAMS = {"alpha": "alpha", "gamma": "gamma", "dim": "dim", "d": "dim"}


def paper_value(method: str, metric: str, density: float) -> float | None:
    row = PAPER_TABLE.get(method)
    for d, v in zip(PAPER_DENSITIES, row[metric] if row else ()):
        if math.isclose(d, density):
            return v
    return None


def _dataclass_from(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ExperimentConfig:
    rt_path: str = ""
    users_path: str | None = None
    densities: list = field(default_factory=lambda: list(PAPER_DENSITIES))
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    methods: list = field(default_factory=lambda: list(ALL_METHODS))
    fiemf: FiemfHyperparams = field(default_factory=FiemfHyperparams)
    pmf: MFConfig = field(default_factory=MFConfig)
    biasedmf: MFConfig = field(default_factory=MFConfig)
    uipcc: UipccConfig = field(default_factory=UipccConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    region_include_self: bool = False
    id_column: str = DEFAULT_ID_COLUMN
    country_column: str = DEFAULT_COUNTRY_COLUMN
    output_dir: str = "results"
    cache_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        self.densities = [float(d) for d in self.densities]
        self.seeds = [int(s) for s in self.seeds]
        self.methods = [m.lower() for m in self.methods]
        if not self.densities or any(not 0 < d < 1 for d in self.densities):
            raise ValueError("densities must be a non-empty list within (0, 1)")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.methods:
            raise ValueError("at least one method is required")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {ALL_METHODS}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        nested = {"fiemf": FiemfHyperparams, "pmf": MFConfig, "biasedmf": MFConfig,
                  "uipcc": UipccConfig, "similarity": SimilarityConfig}
        for key, sub in nested.items():
            if key in data and not isinstance(data[key], sub):
                data[key] = _dataclass_from(sub, data[key])
        data.pop("fingerprint", None)
        return _dataclass_from(cls, data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that influences metric values (not paths or workers)."""
        d = self.to_dict()
        for key in ("rt_path", "users_path", "output_dir", "cache_dir", "workers",
                    "densities", "seeds", "methods"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class CellResult:
    method: str
    density: float
    seed: int
    mae: float = float("nan")
    rmse: float = float("nan")
    wall_time: float = 0.0
    status: str = "ok"
    error: str = ""
    epochs: int = 0
    config_fingerprint: str = ""


@dataclass
class EvalReport:
    cells: list
    config: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)

    def aggregates(self) -> list[dict]:
        groups: dict = {}
        for c in self.cells:
            if c.status == "ok":
                groups.setdefault((c.method, c.density), []).append(c)
        rows = []
        for (method, density), cells in sorted(groups.items(),
                                              key=lambda kv: (_method_rank(kv[0][0]), kv[0][1])):
            maes = np.array([c.mae for c in cells])
            rmses = np.array([c.rmse for c in cells])
            ddof = 1 if len(cells) > 1 else 0
            rows.append({
                "method": method, "density": density, "n": len(cells),
                "mae_mean": float(maes.mean()), "mae_std": float(maes.std(ddof=ddof)),
                "rmse_mean": float(rmses.mean()), "rmse_std": float(rmses.std(ddof=ddof)),
                "paper_mae": paper_value(method, "mae", density),
                "paper_rmse": paper_value(method, "rmse", density),
            })
        return rows

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "report.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for c in self.cells:
                w.writerow(["run", c.method, _fmt(c.density), c.seed, _fmt(c.mae), _fmt(c.rmse),
                            f"{c.wall_time:.3f}", c.status, c.error, c.epochs, c.config_fingerprint])
            for method in TABLE_ORDER:
                for i, d in enumerate(PAPER_DENSITIES):
                    row = PAPER_TABLE[method]
                    w.writerow(["paper", method, _fmt(d), "", _fmt(row["mae"][i]), _fmt(row["rmse"][i]),
                                "", "reference", "", "", ""])
        json_path = out / "report.json"
        summary = {
            "config": self.config,
            "dataset": self.dataset,
            "cells": [asdict(c) for c in self.cells],
            "aggregates": self.aggregates(),
            "paper_reference": {m: {k: list(v) for k, v in PAPER_TABLE[m].items()} for m in TABLE_ORDER},
            "paper_densities": list(PAPER_DENSITIES),
        }
        with open(json_path, "w") as fh:
            json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return csv_path, json_path


REPORT_COLUMNS = ["provenance", "method", "density", "seed", "mae", "rmse", "wall_time",
                  "status", "error", "epochs", "config_fingerprint"]


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _method_rank(method: str) -> int:
    return TABLE_ORDER.index(method) if method in TABLE_ORDER else len(TABLE_ORDER)


# ---------------------------------------------------------------------------
# data and neighbor caching

def load_dataset(config: ExperimentConfig) -> tuple[QosMatrix, UserRegionTable | None]:
    matrix = load_rt_matrix(config.rt_path)
    regions = None
    if config.users_path:
        regions = load_user_regions(config.users_path, config.id_column, config.country_column)
        if regions.num_users != matrix.num_users:
            raise ValueError(f"user list has {regions.num_users} users, matrix has {matrix.num_users}")
    return matrix, regions


def dataset_stats(matrix: QosMatrix, regions: UserRegionTable | None) -> dict:
    lo, hi = matrix.value_range
    return {
        "num_users": matrix.num_users,
        "num_services": matrix.num_services,
        "cells": matrix.num_users * matrix.num_services,
        "observed": len(matrix),
        "regions": len(regions.regions) if regions is not None else None,
        "min": lo, "max": hi, "mean": matrix.global_mean,
        "fingerprint": matrix.fingerprint(),
    }


class NeighborCache:
    """Neighbor tables keyed by (dataset, density, seed, similarity settings, K)."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._memory: dict = {}

    @staticmethod
    def key(fingerprint: str, density: float, seed: int, sim: SimilarityConfig, k: int) -> str:
        raw = json.dumps([fingerprint, repr(float(density)), int(seed), asdict(sim), int(k)])
        return hashlib.sha256(raw.encode()).hexdigest()[:20]

    def get(self, train: QosMatrix, source_fp: str, density: float, seed: int,
            sim: SimilarityConfig, k: int) -> NeighborTable:
        key = self.key(source_fp, density, seed, sim, k)
        if key in self._memory:
            return self._memory[key]
        path = self.directory / f"neighbors_{key}.csv" if self.directory else None
        if path is not None and path.exists():
            table = NeighborTable.read_csv(path, train.num_users, k)
        else:
            table = compute_neighbors(train, k, sim)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                table.write_csv(tmp)
                tmp.replace(path)
        self._memory[key] = table
        return table


# ---------------------------------------------------------------------------
# running cells

def _fit_predict(method: str, config: ExperimentConfig, sp, regions, cache: NeighborCache):
    tr, te = sp.train, sp.test
    if method in ("umean", "imean"):
        model = MeanModel("user" if method == "umean" else "service").fit(tr)
        return model.predict_matrix(te), 0
    if method == "uipcc":
        return UIPCC(config.uipcc).fit(tr).predict_matrix(te), 0
    if method == "pmf":
        cfg = replace(config.pmf, init_seed=config.pmf.init_seed + sp.seed)
        model = pmf_train(tr, cfg)
        return model.predict_matrix(te), model.trace.epochs
    if method == "biasedmf":
        cfg = replace(config.biasedmf, init_seed=config.biasedmf.init_seed + sp.seed)
        model = biasedmf_train(tr, cfg)
        return model.predict_matrix(te), model.trace.epochs
    if method == "fiemf":
        hyper = replace(config.fiemf, init_seed=config.fiemf.init_seed + sp.seed)
        neighbors = cache.get(tr, sp.source_fingerprint, sp.density, sp.seed, config.similarity, hyper.k)
        region_model = build_region_model(tr, regions, config.region_include_self) if regions else None
        model = train(tr, neighbors, region_model, hyper)
        return model.predict_matrix(te), model.trace.epochs
    raise ValueError(f"unknown method {method!r}")


def run_cell(method: str, config: ExperimentConfig, sp, regions, cache: NeighborCache) -> CellResult:
    start = time.perf_counter()
    cell = CellResult(method, sp.density, sp.seed, config_fingerprint=config.fingerprint())
    try:
        if method == "fiemf" and regions is None:
            raise ValueError("fiemf needs a user region list (users_path)")
        pred, epochs = _fit_predict(method, config, sp, regions, cache)
        cell.mae = mae(sp.test.values, pred)
        cell.rmse = rmse(sp.test.values, pred)
        cell.epochs = epochs
    except (TrainingError, ValueError, FloatingPointError) as exc:
        _logger.error("cell %s d=%s seed=%s failed: %s", method, sp.density, sp.seed, exc)
        cell.status = "error"
        cell.error = str(exc)
    cell.wall_time = time.perf_counter() - start
    _logger.info("%s d=%.2f seed=%d mae=%.4f rmse=%.4f (%.1fs)", method, sp.density, sp.seed,
                 cell.mae, cell.rmse, cell.wall_time)
    return cell


def _run_group(args):
    config, matrix, regions, density, seed, cache_dir = args
    cache = NeighborCache(cache_dir)
    sp = split(matrix, density, seed)
    return [run_cell(m, config, sp, regions, cache) for m in config.methods]


def run_experiment(config: ExperimentConfig, data=None, write: bool = True) -> EvalReport:
    """Evaluate every (method, density, seed) cell and optionally write report files.

    ``data`` may pass a preloaded (matrix, regions) pair.
    """
    matrix, regions = data if data is not None else load_dataset(config)
    cache_dir = config.cache_dir
    groups = [(config, matrix, regions, d, s, cache_dir) for d in config.densities for s in config.seeds]
    if config.workers > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_group, groups))
    else:
        results = [_run_group(g) for g in groups]
    cells = [c for group in results for c in group]
    cells.sort(key=lambda c: (_method_rank(c.method), c.density, c.seed))
    report = EvalReport(cells, config.to_dict(), dataset_stats(matrix, regions))
    if write:
        report.write(config.output_dir)
    return report


# ---------------------------------------------------------------------------
# parameter sweeps

def sweep(param: str, values, base_config: ExperimentConfig, density: float | None = None,
          data=None, write: bool = True) -> list[dict]:
    """Re-train FIEMF for each value of ``param`` (alpha, gamma or dim).

    Splits and neighbor tables are shared across values.  An alpha sweep always
    includes both endpoints 0 and 1.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    name = SWEEP_PARAMS[param]
    values = sorted({float(v) for v in values} | ({0.0, 1.0} if name == "alpha" else set()))
    if name == "dim":
        values = [int(v) for v in values]
    for v in values:
        replace(base_config.fiemf, **{name: v})  # validates ranges before any training
    density = base_config.densities[0] if density is None else float(density)
    matrix, regions = data if data is not None else load_dataset(base_config)
    cache = NeighborCache(base_config.cache_dir)
    splits = [split(matrix, density, s) for s in base_config.seeds]
    rows = []
    for v in values:
        cfg = replace(base_config, fiemf=replace(base_config.fiemf, **{name: v}), methods=["fiemf"])
        cells = [run_cell("fiemf", cfg, sp, regions, cache) for sp in splits]
        ok = [c for c in cells if c.status == "ok"]
        row = {"param": name, "value": v, "density": density, "n": len(ok),
               "mae": float(np.mean([c.mae for c in ok])) if ok else float("nan"),
               "rmse": float(np.mean([c.rmse for c in ok])) if ok else float("nan"),
               "mae_std": float(np.std([c.mae for c in ok])) if ok else float("nan"),
               "rmse_std": float(np.std([c.rmse for c in ok])) if ok else float("nan"),
               "errors": "; ".join(c.error for c in cells if c.status != "ok")}
        rows.append(row)
    if write:
        out = Path(base_config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"sweep_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_COLUMNS)
            for r in rows:
                w.writerow([r["param"], _fmt(r["value"]) if name != "dim" else r["value"],
                            _fmt(r["density"]), r["n"], _fmt(r["mae"]), _fmt(r["rmse"]),
                            _fmt(r["mae_std"]), _fmt(r["rmse_std"]), r["errors"]])
    return rows


SWEEP_COLUMNS = ["param", "value", "density", "n", "mae", "rmse", "mae_std", "rmse_std", "errors"]


# ---------------------------------------------------------------------------
# published-table style comparison

def read_report_cells(paths) -> list[CellResult]:
    cells = []
    for path in paths:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row.get("provenance") != "run":
                    continue
                cells.append(CellResult(
                    row["method"], float(row["density"]), int(row["seed"]),
                    float(row["mae"]) if row["mae"] else float("nan"),
                    float(row["rmse"]) if row["rmse"] else float("nan"),
                    float(row["wall_time"] or 0), row["status"], row["error"],
                    int(row["epochs"] or 0), row["config_fingerprint"]))
    return cells


def comparison_table(cells, densities=PAPER_DENSITIES) -> list[list]:
    """Rows laid out like the published accuracy table.

    Run rows average seeds per (method, density).  NIMF and NBMF rows are the
    published values.  "Improve" is the mean over densities of
    (method - FIEMF) / method, against the run FIEMF when present.
    """
    report = EvalReport(list(cells))
    means = {(a["method"], a["density"]): a for a in report.aggregates()}

    def lookup(method, metric, d):
        for (m, dd), agg in means.items():
            if m == method and math.isclose(dd, d):
                return agg[f"{metric}_mean"]
        return None

    run_methods = {m for m, _ in means}
    header = (["Method", "Source"] + [f"MAE D={round(d * 100)}%" for d in densities] + ["MAE Improve"]
              + [f"RMSE D={round(d * 100)}%" for d in densities] + ["RMSE Improve"])
    rows = [header]
    for method in TABLE_ORDER:
        source = "run" if method in run_methods else "paper"
        if source == "paper" and method not in ("nimf", "nbmf") and method != "fiemf":
            continue
        row = [DISPLAY_NAMES[method], source]
        for metric in ("mae", "rmse"):
            vals, gains = [], []
            for d in densities:
                v = lookup(method, metric, d) if source == "run" else paper_value(method, metric, d)
                ref = lookup("fiemf", metric, d) if "fiemf" in run_methods else paper_value("fiemf", metric, d)
                vals.append(v)
                if v is not None and ref is not None and v > 0 and method != "fiemf":
                    gains.append((v - ref) / v)
            row += [_fmt_table(v) for v in vals]
            row.append(f"{100 * np.mean(gains):.2f}%" if gains else "-")
        rows.append(row)
    return rows


def _fmt_table(v) -> str:
    return "" if v is None else f"{v:.4f}"


def write_comparison(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
