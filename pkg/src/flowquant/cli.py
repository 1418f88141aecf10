"""Command-line front end.

    flowquant gen-data  CONFIG [--out FILE]
    flowquant train     CONFIG [--runs-dir DIR]
    flowquant ablation  CONFIG [--runs-dir DIR]
    flowquant simulate  PACKAGE [--design D] [--config CONFIG]
    flowquant infer     PACKAGE INPUT_CSV [--columns ...] [--out FILE]
    flowquant report    RECORDS_CSV [RECORDS_CSV ...] [--out FILE]

Artifacts go to ``<runs-dir>/<name>-<config hash>/``. On failure the process
exits non-zero and prints a one-line JSON error object to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import hwsim
from .datakit import DataError, gen_synthetic, load_csv, write_csv
from .experiments import (
    ConfigError,
    ExperimentConfig,
    ablation_table,
    read_records,
    records_csv,
    run_ablation,
    run_sweep,
    summarize,
)
from .intinfer import PackageError, int_predict, load_package

log = logging.getLogger("flowquant")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(RuntimeError):
    pass


def _run_dir(cfg: ExperimentConfig, runs_dir) -> Path:
    d = Path(runs_dir) / f"{cfg.name}-{cfg.digest()}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(args) -> dict:
    cfg = ExperimentConfig.load(args.config)
    if cfg.synthetic is None:
        raise ConfigError("gen-data needs a synthetic dataset config")
    ds = gen_synthetic(cfg.synthetic)
    out = Path(args.out) if args.out else _run_dir(cfg, args.runs_dir) / "data.csv"
    write_csv(ds, out)
    return {"path": str(out), "rows": len(ds), "inputs": ds.n_features}


def cmd_train(args) -> dict:
    cfg = ExperimentConfig.load(args.config)
    run_dir = _run_dir(cfg, args.runs_dir)
    model_dir = None
    if cfg.save_models:
        model_dir = run_dir / "models"
        model_dir.mkdir(exist_ok=True)
    records = run_sweep(cfg, model_dir)
    (run_dir / "records.csv").write_text(records_csv(records), encoding="utf-8")
    summary = summarize(records)
    _write_json(run_dir / "summary.json", summary)
    out = {"run_dir": str(run_dir), "records": len(records), "failed": summary["failed"]}
    if cfg.ablation:
        out["ablation"] = _ablation(cfg, run_dir)
    return out


def _ablation(cfg: ExperimentConfig, run_dir: Path) -> str:
    records = run_ablation(cfg)
    (run_dir / "ablation_records.csv").write_text(records_csv(records), encoding="utf-8")
    table = ablation_table(records)
    _write_json(run_dir / "ablation.json", {"fold": cfg.ablation_fold, "rows": table, "summary": summarize(records)})
    return str(run_dir / "ablation.json")


def cmd_ablation(args) -> dict:
    cfg = ExperimentConfig.load(args.config)
    run_dir = _run_dir(cfg, args.runs_dir)
    path = _ablation(cfg, run_dir)
    return {"run_dir": str(run_dir), "ablation": path}


def cmd_simulate(args) -> dict:
    qm = load_package(args.package)
    design = args.design
    if design is None:
        design = hwsim.FIXED_BASELINE if qm.scheme == "F/F" else hwsim.PIPELINED
    power_table = None
    clock = hwsim.DEFAULT_CLOCK_HZ
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        power_table, clock = cfg.power_mw, cfg.clock_hz
    rep = hwsim.report(qm.hidden_size, qm.inputs, design, clock, power_table)
    # step the datapath once on a zero-point input to confirm the cycle model
    x0 = np.full(qm.inputs, qm.input_params.zero_point, dtype=np.int64)
    _, traced = hwsim.simulate_network(qm, x0, design)
    doc = rep.to_dict()
    doc["traced_cycles"] = sum(traced)
    doc["package"] = str(args.package)
    if args.out:
        _write_json(Path(args.out), doc)
    return doc


def cmd_infer(args) -> dict:
    qm = load_package(args.package)
    path = Path(args.input)
    with path.open(newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if not header:
        raise DataError(f"{path}: empty file")
    columns = args.columns or [c for c in header if c not in (args.drop or [])]
    if len(columns) != qm.inputs:
        raise CliError(
            f"package expects D={qm.inputs} input columns, {path} provides {len(columns)}: {columns}"
        )
    # reuse the strict CSV parser; the first column doubles as a dummy target
    ds = load_csv(path, columns, columns[0])
    x = ds.inputs
    if qm.stats is not None:
        lo, hi = qm.stats.input_min, qm.stats.input_max
        width = np.where(hi > lo, hi - lo, 1.0)
        x = np.where(hi > lo, (x - lo) / width, 0.0)
    y_q, y = int_predict(qm, x)
    if qm.stats is not None:
        y = y * qm.stats.target_range + qm.stats.target_min
    out = Path(args.out) if args.out else path.with_name(path.stem + "_pred.csv")
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y_q", "prediction"])
        for q, v in zip(y_q, y):
            w.writerow([int(q), repr(float(v))])
    return {"path": str(out), "rows": int(len(y))}


def cmd_report(args) -> dict:
    records = []
    for p in args.records:
        records.extend(read_records(p))
    summary = summarize(records)
    if any(r.variant == "ablation" for r in records):
        summary["ablation"] = ablation_table(records)
    if args.out:
        _write_json(Path(args.out), summary)
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowquant", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic flow dataset as CSV")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--runs-dir", default="runs")
    s.set_defaults(func=cmd_gen_data)

    for name, func, text in (
        ("train", cmd_train, "run the fold x run x variant x size sweep"),
        ("ablation", cmd_ablation, "run the L/F per-layer scheme grid on one fold"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("--runs-dir", default="runs")
        s.set_defaults(func=func)

    s = sub.add_parser("simulate", help="cycle/latency/energy report for a deployment package")
    s.add_argument("package")
    s.add_argument("--design", choices=hwsim.DESIGNS)
    s.add_argument("--config", help="experiment config supplying power table and clock")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("infer", help="integer-only predictions for a CSV of sensor rows")
    s.add_argument("package")
    s.add_argument("input")
    s.add_argument("--columns", nargs="+")
    s.add_argument("--drop", nargs="+", default=["flow"], help="columns to ignore (default: flow)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("report", help="summarize RunRecord CSVs")
    s.add_argument("records", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except (ConfigError, DataError, PackageError, CliError, FileNotFoundError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
