"""Experiment orchestration: sweeps over folds, seeds, variants and hidden sizes."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import hwsim
from .datakit import (
    Dataset,
    NormStats,
    SyntheticConfig,
    gen_synthetic,
    load_csv,
    make_folds,
    normalize,
    denormalize,
)
from .intinfer import convert, export_package, int_predict
from .mlp import TrainConfig, TrainingDiverged, evaluate_denormalized, init_model, mse, train
from .qat import qat_predict, qat_train

VARIANTS = ("M-Float", "M-Fixed", "M-Linear")
VARIANT_SCHEMES = {"M-Fixed": "F/F", "M-Linear": "L/L"}
ABLATION_SCHEMES = ("L/L", "L/F", "F/L", "F/F")
HIDDEN_SIZES = (10, 30, 60, 120)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    csv_path: str | None = None
    input_columns: tuple[str, ...] = ()
    target_column: str = "flow"
    hidden_sizes: tuple[int, ...] = (10, 30, 60, 120)
    variants: tuple[str, ...] = VARIANTS
    ablation: bool = False
    ablation_fold: int = 0
    folds: int = 7
    runs_per_fold: int = 3
    master_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=32))
    power_mw: dict = field(default_factory=lambda: hwsim.DEFAULT_POWER_MW)
    clock_hz: float = hwsim.DEFAULT_CLOCK_HZ
    workers: int = 1
    save_models: bool = True

    def __post_init__(self):
        if not self.variants:
            raise ConfigError("at least one model variant is required")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {bad}; expected a subset of {VARIANTS}")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be a non-empty list of positive integers")
        if self.runs_per_fold < 1:
            raise ConfigError("runs per fold must be >= 1")
        if self.folds < 2:
            raise ConfigError("fold count must be >= 2")
        if not 0 <= self.ablation_fold < self.folds:
            raise ConfigError("ablation fold index out of range")
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("configure exactly one dataset source: 'synthetic' or 'csv'")
        if self.csv_path is not None and not self.input_columns:
            raise ConfigError("CSV datasets need 'input_columns'")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        kw = {}
        data = doc.pop("dataset", {"synthetic": {}})
        if "csv" in data:
            kw["synthetic"] = None
            kw["csv_path"] = data["csv"]
            kw["input_columns"] = tuple(data.get("input_columns", ()))
            kw["target_column"] = data.get("target_column", "flow")
        else:
            try:
                kw["synthetic"] = SyntheticConfig(**data.get("synthetic", {}))
            except TypeError as exc:
                raise ConfigError(f"bad synthetic dataset config: {exc}") from None
        if "train" in doc:
            base = {"batch_size": 32}
            base.update(doc.pop("train"))
            try:
                kw["train"] = TrainConfig(**base)
            except TypeError as exc:
                raise ConfigError(f"bad train config: {exc}") from None
        if "power_mw" in doc:
            kw["power_mw"] = {
                design: {int(h): float(p) for h, p in table.items()}
                for design, table in doc.pop("power_mw").items()
            }
        for key in ("hidden_sizes", "variants"):
            if key in doc:
                kw[key] = tuple(doc.pop(key))
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kw.update(doc)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "hidden_sizes": list(self.hidden_sizes),
            "variants": list(self.variants),
            "ablation": self.ablation,
            "ablation_fold": self.ablation_fold,
            "folds": self.folds,
            "runs_per_fold": self.runs_per_fold,
            "master_seed": self.master_seed,
            "train": asdict(self.train),
            "power_mw": {d: {str(h): p for h, p in t.items()} for d, t in self.power_mw.items()},
            "clock_hz": self.clock_hz,
        }
        if self.synthetic is not None:
            doc["dataset"] = {"synthetic": asdict(self.synthetic)}
        else:
            doc["dataset"] = {
                "csv": self.csv_path,
                "input_columns": list(self.input_columns),
                "target_column": self.target_column,
            }
        return doc

    def digest(self) -> str:
        """Hash of everything that affects results (not workers or I/O flags)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def load_dataset(self) -> Dataset:
        if self.synthetic is not None:
            return gen_synthetic(self.synthetic)
        return load_csv(self.csv_path, self.input_columns, self.target_column)


RECORD_FIELDS = (
    "dataset", "fold", "run", "seed", "variant", "hidden", "scheme", "status",
    "test_mse", "int_test_mse", "epochs", "best_epoch", "stopped_early",
    "agree_within_1lsb", "max_lsb_diff",
    "design", "total_cycles", "latency_us", "power_mw", "energy_uj",
)


@dataclass
class RunRecord:
    dataset: str
    fold: int
    run: int
    seed: int
    variant: str
    hidden: int
    scheme: str = ""
    status: str = "ok"
    test_mse: float = math.nan
    int_test_mse: float | None = None
    epochs: int = 0
    best_epoch: int = -1
    stopped_early: bool = False
    agree_within_1lsb: float | None = None
    max_lsb_diff: int | None = None
    design: str = ""
    total_cycles: int | None = None
    latency_us: float | None = None
    power_mw: float | None = None
    energy_uj: float | None = None

    @property
    def quantized(self) -> bool:
        return bool(self.scheme)

    def row(self) -> list[str]:
        out = []
        for name in RECORD_FIELDS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_row(cls, row: dict) -> "RunRecord":
        kw = {}
        for f in fields(cls):
            raw = row.get(f.name, "")
            if raw == "" and f.name not in ("dataset", "variant", "scheme", "status", "design"):
                continue
            if f.name in ("fold", "run", "seed", "hidden", "epochs", "best_epoch", "max_lsb_diff", "total_cycles"):
                kw[f.name] = int(raw)
            elif f.name == "stopped_early":
                kw[f.name] = raw == "True"
            elif f.name in ("dataset", "variant", "scheme", "status", "design"):
                kw[f.name] = raw
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


def run_seed(master: int, fold: int, run: int, variant: str, hidden: int) -> int:
    key = f"{master}:{fold}:{run}:{variant}:{hidden}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class Cell:
    fold: int
    run: int
    variant: str  # M-Float / M-Fixed / M-Linear / ablation
    hidden: int
    scheme: str = ""  # "" for M-Float


def plan_cells(cfg: ExperimentConfig) -> list[Cell]:
    cells = []
    for fold in range(cfg.folds):
        for run in range(cfg.runs_per_fold):
            for hidden in cfg.hidden_sizes:
                for variant in cfg.variants:
                    cells.append(Cell(fold, run, variant, hidden, VARIANT_SCHEMES.get(variant, "")))
    return cells


def plan_ablation(cfg: ExperimentConfig) -> list[Cell]:
    return [
        Cell(cfg.ablation_fold, run, "ablation", hidden, scheme)
        for run in range(cfg.runs_per_fold)
        for hidden in cfg.hidden_sizes
        for scheme in ABLATION_SCHEMES
    ]


def _design_for(scheme: str) -> str:
    return hwsim.FIXED_BASELINE if scheme == "F/F" else hwsim.PIPELINED


def run_cell(cfg: ExperimentConfig, cell: Cell, ds: Dataset | None = None, model_dir: Path | None = None) -> RunRecord:
    """Train and evaluate one (fold, run, variant, hidden) cell; self-contained and order-free."""
    ds = cfg.load_dataset() if ds is None else ds
    train_raw, val_raw, test_raw = make_folds(ds, cfg.folds)[cell.fold]
    stats = NormStats.fit(train_raw)
    tr, va, te = (normalize(d, stats) for d in (train_raw, val_raw, test_raw))
    # ablation cells share one seed across the four scheme pairs, so the grid is paired
    seed = run_seed(cfg.master_seed, cell.fold, cell.run, cell.variant, cell.hidden)
    tcfg = replace(cfg.train, seed=seed)
    rec = RunRecord(ds.name, cell.fold, cell.run, seed, cell.variant, cell.hidden, cell.scheme)
    init = init_model(ds.n_features, cell.hidden, seed)
    try:
        if not cell.scheme:
            model, hist = train(init, tr, va, tcfg)
            rec.test_mse = evaluate_denormalized(model, te, stats)
        else:
            qm, hist = qat_train(tr, va, cell.hidden, cell.scheme, tcfg, model=init)
            y_fake = qat_predict(qm, te.inputs)
            rec.test_mse = mse(denormalize(y_fake, stats), denormalize(te.targets, stats))
            q = convert(qm, stats)
            _, y_int = int_predict(q, te.inputs)
            rec.int_test_mse = mse(denormalize(y_int, stats), denormalize(te.targets, stats))
            lsb = np.abs(y_int - y_fake) / q.output_params.scale
            rec.agree_within_1lsb = float(np.mean(lsb <= 1.0 + 1e-9))
            rec.max_lsb_diff = int(np.round(lsb.max()))
            design = _design_for(cell.scheme)
            rec.design = design
            rec.total_cycles = hwsim.estimate_cycles(cell.hidden, ds.n_features, design)
            rec.latency_us = hwsim.latency(rec.total_cycles, cfg.clock_hz) * 1e6
            if cell.hidden in cfg.power_mw.get(design, {}):
                rep = hwsim.report(cell.hidden, ds.n_features, design, cfg.clock_hz, cfg.power_mw)
                rec.power_mw = rep.power_w * 1e3
                rec.energy_uj = rep.energy_j * 1e6
            if model_dir is not None:
                tag = cell.scheme.replace("/", "")
                export_package(q, model_dir / f"{cell.variant}_{tag}_h{cell.hidden}_f{cell.fold}_r{cell.run}.fqpkg")
    except TrainingDiverged as exc:
        rec.status = f"diverged: {exc}"
        return rec
    rec.epochs = hist.epochs
    rec.best_epoch = hist.best_epoch
    rec.stopped_early = hist.stopped_early
    return rec


def _run_many(cfg: ExperimentConfig, cells: list[Cell], model_dir: Path | None) -> list[RunRecord]:
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            recs = list(pool.map(run_cell, [cfg] * len(cells), cells, [None] * len(cells), [model_dir] * len(cells)))
    else:
        ds = cfg.load_dataset()
        recs = [run_cell(cfg, c, ds, model_dir) for c in cells]
    order = {c: i for i, c in enumerate(cells)}
    return sorted(recs, key=lambda r: order[Cell(r.fold, r.run, r.variant, r.hidden, r.scheme)])


def run_sweep(cfg: ExperimentConfig, model_dir: Path | None = None) -> list[RunRecord]:
    return _run_many(cfg, plan_cells(cfg), model_dir)


def run_ablation(cfg: ExperimentConfig, model_dir: Path | None = None) -> list[RunRecord]:
    return _run_many(cfg, plan_ablation(cfg), model_dir)


def records_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_records(records: list[RunRecord], path) -> None:
    Path(path).write_text(records_csv(records), encoding="utf-8")


def read_records(path) -> list[RunRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [RunRecord.from_row(row) for row in csv.DictReader(fh)]


def percent_reduction(fixed: float, linear: float) -> float:
    """Relative MSE reduction of the linear-quantized model, in percent (2 decimals)."""
    if fixed == 0:
        return 0.0
    return round((fixed - linear) / fixed * 100.0, 2)


def _stats(values: list[float]) -> dict:
    return {
        "n": len(values),
        "median": statistics.median(values),
        "mean": statistics.fmean(values),
        "min": min(values),
        "variance": statistics.pvariance(values) if len(values) > 1 else 0.0,
    }


def summarize(records: list[RunRecord]) -> dict:
    """Per-(dataset, hidden, variant/scheme) MSE statistics plus linear-vs-fixed deltas."""
    if not records:
        raise ValueError("no records to summarize")
    groups: dict[tuple, list[float]] = {}
    failed = 0
    for r in records:
        if r.status != "ok" or not math.isfinite(r.test_mse):
            failed += 1
            continue
        label = r.variant if r.variant != "ablation" else f"ablation {r.scheme}"
        groups.setdefault((r.dataset, r.hidden, label), []).append(r.test_mse)
    cells = []
    for (dataset, hidden, label), vals in sorted(groups.items()):
        cells.append({"dataset": dataset, "hidden": hidden, "variant": label, **_stats(vals)})
    deltas = []
    pairs = [("M-Fixed", "M-Linear"), ("ablation F/F", "ablation L/L")]
    for dataset, hidden in sorted({(d, h) for d, h, _ in groups}):
        for fixed_label, linear_label in pairs:
            f = groups.get((dataset, hidden, fixed_label))
            l = groups.get((dataset, hidden, linear_label))
            if f and l:
                fs, ls = _stats(f), _stats(l)
                deltas.append({
                    "dataset": dataset,
                    "hidden": hidden,
                    "compare": f"{linear_label} vs {fixed_label}",
                    "reduction_pct_median": percent_reduction(fs["median"], ls["median"]),
                    "reduction_pct_mean": percent_reduction(fs["mean"], ls["mean"]),
                })
    return {"records": len(records), "failed": failed, "cells": cells, "linear_vs_fixed": deltas}


def ablation_table(records: list[RunRecord]) -> list[dict]:
    """Rows in (hidden, hidden-layer / output-layer scheme) order with median and mean MSE."""
    rows = []
    hiddens = sorted({r.hidden for r in records if r.variant == "ablation"})
    for h in hiddens:
        for scheme in ABLATION_SCHEMES:
            vals = [r.test_mse for r in records
                    if r.variant == "ablation" and r.hidden == h and r.scheme == scheme
                    and r.status == "ok" and math.isfinite(r.test_mse)]
            if vals:
                rows.append({"hidden": h, "config": scheme.replace("/", " / "),
                             "median_mse": statistics.median(vals), "mean_mse": statistics.fmean(vals),
                             "n": len(vals)})
    return rows
