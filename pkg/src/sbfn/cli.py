"""``sbfn`` command line: regress, classify, sweep, synth, diagnose, export-structured.

Each experiment reads one JSON config (``--config``), fills in defaults,
applies flag overrides, prints the resolved config and writes
``<out>/<experiment>/<timestamp>/`` with records.csv, records.json and
diagnostics.csv.

Exit codes: 0 success, 2 configuration error, 3 data/format error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiments as ex
from .datasets import standardize
from .errors import ConfigurationError, DataFormatError, NumericError, SbfnError, ShapeError
from .training import (ClassificationConfig, RegressionConfig, derive_seed, fit_closed_form,
                       train_classification, train_regression)

log = logging.getLogger("sbfn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "regress": {"seed": 0, "folds": 10, "lambda2s": None,
                "data": asdict(ex.DataSpec()), "model": asdict(RegressionConfig())},
    "classify": {"seed": 0, "splits": 5, "test_fraction": 0.25, "epsilons": [0.0, 0.5],
                 "data": asdict(ex.DataSpec(kind="blobs", n=600)), "model": asdict(ClassificationConfig())},
    "sweep": {"seed": 0, "data": asdict(ex.DataSpec()), "model": asdict(RegressionConfig()),
              "grid": asdict(ex.SweepGrid())},
    "synth": {"seed": 0, "runs": 5, "sizes": list(ex.SYNTH_SIZES), "lambda2": 1e-2,
              "n_train": 300, "n_test": 1000, "noise_std": 0.1},
    "export-structured": {"seed": 0, "task": "regression", "data": asdict(ex.DataSpec()),
                          "model": asdict(RegressionConfig())},
}


def _merge(base: dict, over: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigurationError(f"unknown key {where}.{k}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def resolve_config(command: str, args) -> dict:
    base = copy.deepcopy(DEFAULTS[command])
    user = {}
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigurationError(f"{args.config}: top level must be an object")
    if command == "export-structured" and user.get("task") == "classification":
        base["data"] = asdict(ex.DataSpec(kind="blobs", n=600))
        base["model"] = asdict(ClassificationConfig())
    cfg = _merge(base, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "model" in cfg and cfg.get("task", "regression") == "regression" and command != "classify":
        if getattr(args, "mode", None):
            cfg["model"]["mode"] = args.mode
        if getattr(args, "variant", None):
            cfg["model"]["variant"] = args.variant
    elif getattr(args, "variant", None) not in (None, "kmeans"):
        raise ConfigurationError("classification uses KMeans-initialised centres; --variant must be kmeans")
    return cfg


def _data(cfg) -> tuple:
    spec = ex._build(ex.DataSpec, cfg["data"], "data")
    return spec, spec.load(cfg["seed"])


def _print_config(cfg: dict) -> None:
    print(json.dumps(ex._jsonable(cfg), indent=2))


# -- commands --------------------------------------------------------------------------

def cmd_regress(cfg: dict, args) -> Path:
    model = ex._build(RegressionConfig, cfg["model"], "model")
    spec, data = _data(cfg)
    records, members = ex.run_regression(data, model, cfg["folds"], cfg["seed"], cfg["lambda2s"],
                                         spec.standardize, "regress", catch=False)
    run_dir = ex.new_run_dir(args.out, "regress")
    ex.write_run(run_dir, records, [members] * len(records), cfg)
    for r in records:
        s = r.summary
        print(f"lambda2={r.config['lambda2']}: s-BFN RMSE {s['rmse_sbfn']['mean']:.4f} "
              f"+- {s['rmse_sbfn']['half_width_95']:.4f}, arithmetic {s['rmse_arith']['mean']:.4f}")
    return run_dir


def cmd_classify(cfg: dict, args) -> Path:
    spec, data = _data(cfg)
    eps_list = cfg["epsilons"] if cfg["epsilons"] is not None else [cfg["model"]["epsilon"]]
    models = [ex._build(ClassificationConfig, {**cfg["model"], "epsilon": e}, "model") for e in eps_list]
    records, members = [], []
    for m in models:
        rec, mem = ex.run_classification(data, m, cfg["splits"], cfg["test_fraction"], cfg["seed"],
                                         spec.standardize, catch=False)
        records.append(rec)
        members.append(mem)
        s = rec.summary
        print(f"epsilon={m.epsilon}: s-BFN {s['sbfn_acc']['mean']:.4f}  logit-avg {s['logit_avg_acc']['mean']:.4f}"
              f"  MoE {s['moe_acc']['mean']:.4f}  base-avg {s['base_avg_acc']['mean']:.4f}")
    run_dir = ex.new_run_dir(args.out, "classify")
    ex.write_run(run_dir, records, members, cfg)
    return run_dir


def cmd_sweep(cfg: dict, args) -> Path:
    grid = ex._build(ex.SweepGrid, cfg["grid"], "grid")
    ex._build(RegressionConfig, cfg["model"], "model")
    spec, data = _data(cfg)
    print(f"sweep: {grid.num_configs} configurations x {grid.repeats} repeats x {grid.folds} folds "
          f"= {grid.total_runs} runs", flush=True)
    records = ex.run_sweep(data, grid, cfg["model"], cfg["seed"], args.jobs, spec.standardize)
    run_dir = ex.new_run_dir(args.out, "sweep")
    ex.write_run(run_dir, records, [[] for _ in records], cfg)
    failed = sum(r.status != "ok" for r in records)
    print(f"{len(records)} records ({failed} failed)")
    return run_dir


def cmd_synth(cfg: dict, args) -> Path:
    agg, per_run, centres = ex.run_synth(cfg["seed"], cfg["runs"], cfg["sizes"], cfg["lambda2"],
                                         cfg["n_train"], cfg["n_test"], cfg["noise_std"])
    run_dir = ex.new_run_dir(args.out, "synth")
    (run_dir / "config.json").write_text(json.dumps(ex._jsonable(cfg), indent=2))
    ex.write_csv(run_dir / "records.csv", agg)
    (run_dir / "records.json").write_text(json.dumps(ex._jsonable({"aggregate": agg, "runs": per_run}), indent=1))
    ex.write_csv(run_dir / "centers.csv", centres)
    for row in agg:
        print(f"{row['strategy']:>10} M={row['M']:<3} RMSE {row['mean_rmse']:.4f} (std {row['std_rmse']:.4f})")
    return run_dir


def cmd_diagnose(args) -> Path:
    try:
        records, members = ex.load_run(args.run_dir)
    except FileNotFoundError as exc:
        raise DataFormatError(str(exc)) from None
    rows = ex.diagnostics_rows(records, members)
    if not rows:
        raise DataFormatError(f"{args.run_dir} holds no stored member predictions")
    out = Path(args.out) if args.out_given else Path(args.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_csv(out / "diagnostics.csv", rows, ex.DIAG_COLUMNS)
    for r in rows:
        print(", ".join(f"{k}={ex._cell(r.get(k))}" for k in ex.DIAG_COLUMNS))
    return out


def cmd_export_structured(cfg: dict, args) -> Path:
    spec, data = _data(cfg)
    if spec.standardize:
        data = standardize(data)
    seed = cfg["seed"]
    run_dir = ex.new_run_dir(args.out, "export-structured")
    if cfg["task"] == "regression":
        model = ex._build(RegressionConfig, cfg["model"], "model")
        ens = train_regression(data.features, data.targets, model, seed=seed)
        D = ens.structured(data.features)
        if ens.combiner is None:
            ens.combiner = fit_closed_form(D, data.targets, model.lambda2, model.variant, model.units,
                                           derive_seed(seed, "kmeans"), model.normalize_rows)
    elif cfg["task"] == "classification":
        model = ex._build(ClassificationConfig, cfg["model"], "model")
        y = np.asarray(data.targets, dtype=int)
        ens = train_classification(data.features, y, int(y.max()) + 1, model, seed=seed)
        D = ens.structured(data.features)
    else:
        raise ConfigurationError(f"unknown task {cfg['task']!r}")
    D.to_csv(run_dir / "structured.csv")
    (run_dir / "combiner.json").write_text(ens.combiner.to_json())
    (run_dir / "config.json").write_text(json.dumps(ex._jsonable(cfg), indent=2))
    print(f"{D.values.shape[0]} rows x {D.values.shape[1]} columns")
    return run_dir


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbfn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("regress", "classify", "sweep", "synth", "export-structured"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config; missing fields take defaults")
        s.add_argument("--seed", type=int, help="master seed (overrides config)")
        s.add_argument("--out", default="results", help="results root directory")
        s.add_argument("--mode", choices=("closed-form", "iterative"))
        s.add_argument("--variant", choices=("g1", "g2", "g3", "kmeans"))
        s.add_argument("--jobs", type=int, default=1, help="worker processes (sweep)")
    d = sub.add_parser("diagnose")
    d.add_argument("run_dir", help="a regress/classify output directory")
    d.add_argument("--out", help="where to write diagnostics.csv (default: run_dir)")
    return p


COMMANDS = {"regress": cmd_regress, "classify": cmd_classify, "sweep": cmd_sweep,
            "synth": cmd_synth, "export-structured": cmd_export_structured}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            args.out_given = args.out is not None
            run_dir = cmd_diagnose(args)
        else:
            if args.jobs < 1:
                raise ConfigurationError("--jobs must be >= 1")
            cfg = resolve_config(args.command, args)
            _print_config(cfg)
            run_dir = COMMANDS[args.command](cfg, args)
        print(f"wrote {run_dir}")
        return EXIT_OK
    except (ConfigurationError, ShapeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SbfnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
