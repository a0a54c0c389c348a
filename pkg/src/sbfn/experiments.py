"""Experiment runners behind the CLI: fold loops, sweeps, synthetic study, diagnostics.

Every runner is a pure function of its config and master seed. Child seeds
for data, folds, models and centres are derived from the master seed, so a
record can be regenerated from the ``(config, seed)`` pair it stores.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np

from . import combiner as cb
from .datasets import Dataset, gaussian_blobs, holdout_split, kfold, load_csv, load_idx, standardize, synth_sine
from .diagnostics import Summary, disagreement_report, squared_loss_decomposition, summarize
from .errors import ConfigurationError, DataFormatError, SbfnError
from .structured import softmax
from .training import (ClassificationConfig, RegressionConfig, derive_seed, evaluate_classification,
                       fit_closed_form, rmse, train_classification, train_regression)

log = logging.getLogger(__name__)


# -- configuration -------------------------------------------------------------------

@dataclass
class DataSpec:
    kind: str = "synth"               # synth | csv | blobs | idx
    n: int = 300                      # synth / blobs sample count
    noise_std: float = 0.1
    distractors: int = 0
    num_classes: int = 3
    dim: int = 2
    spread: float = 1.0
    separation: float = 2.0
    path: Optional[str] = None        # csv
    target_column: Optional[str] = None
    delimiter: str = ","
    decimal: str = "."
    missing_markers: tuple = ("",)
    drop_columns: tuple = ()
    images: Optional[str] = None      # idx
    labels: Optional[str] = None
    downsample: int = 1
    limit: Optional[int] = None
    standardize: bool = True

    def __post_init__(self):
        if self.kind not in ("synth", "csv", "blobs", "idx"):
            raise ConfigurationError(f"unknown data kind {self.kind!r}")
        self.missing_markers = tuple(str(m) for m in self.missing_markers)
        self.drop_columns = tuple(self.drop_columns)
        if self.kind == "csv" and not (self.path and self.target_column):
            raise ConfigurationError("csv data needs 'path' and 'target_column'")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigurationError("idx data needs 'images' and 'labels'")

    def load(self, seed: int) -> Dataset:
        if self.kind == "synth":
            return synth_sine(self.n, 1, self.noise_std, derive_seed(seed, "data"), self.distractors)[0]
        if self.kind == "blobs":
            return gaussian_blobs(self.n, self.num_classes, self.dim, self.spread, self.separation,
                                  derive_seed(seed, "data"))
        if self.kind == "csv":
            return load_csv(self.path, self.target_column, self.delimiter, self.missing_markers,
                            self.decimal, self.drop_columns)
        return load_idx(self.images, self.labels, self.downsample, self.limit)


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad {where} config: {exc}") from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


TABLE3_GRID = {
    "num_models": [2, 5, 10, 20, 35],
    "epochs": [20, 50, 200, 2000],
    "learning_rate": [0.03, 0.3, 1.0],
    "init_scale": [1e-4, 0.01, 0.1, 1.0],
    "epsilon": [0.0, 0.1, 0.35, 0.5],
    "l1": [0.0, 1e-4, 0.01, 0.07],
    "lambda2": [0.0, 3.0, 5.0, 7.0],
}


@dataclass
class SweepGrid:
    """Cartesian grid over the regression hyperparameters.

    The default varies the ensemble size, diversity and ridge axes over
    their full ranges (5 x 4 x 4 = 80 configurations) and pins the base
    training axes to their first or middle values.
    """
    num_models: list = field(default_factory=lambda: list(TABLE3_GRID["num_models"]))
    epsilon: list = field(default_factory=lambda: list(TABLE3_GRID["epsilon"]))
    epochs: list = field(default_factory=lambda: [20])
    learning_rate: list = field(default_factory=lambda: [0.03])   # used for theta and alpha
    init_scale: list = field(default_factory=lambda: [0.1])
    l1: list = field(default_factory=lambda: [0.0])
    lambda2: list = field(default_factory=lambda: list(TABLE3_GRID["lambda2"]))
    repeats: int = 1
    folds: int = 10

    AXES = ("num_models", "epsilon", "epochs", "learning_rate", "init_scale", "l1", "lambda2")

    def __post_init__(self):
        for a in self.AXES:
            v = getattr(self, a)
            if not isinstance(v, (list, tuple)) or not v:
                raise ConfigurationError(f"sweep axis {a!r} must be a nonempty list")
            setattr(self, a, list(v))
        if self.repeats < 1 or self.folds < 2:
            raise ConfigurationError("repeats >= 1 and folds >= 2 required")

    @property
    def num_configs(self) -> int:
        return math.prod(len(getattr(self, a)) for a in self.AXES)

    @property
    def total_runs(self) -> int:
        return self.num_configs * self.repeats * self.folds

    def configs(self) -> list:
        return [dict(zip(self.AXES, combo)) for combo in itertools.product(*(getattr(self, a) for a in self.AXES))]


def _model_from_point(base: dict, point: dict) -> RegressionConfig:
    m = dict(base)
    m.update(num_models=point["num_models"], epsilon=point["epsilon"], epochs=point["epochs"],
             lr_theta=point["learning_rate"], lr_alpha=point["learning_rate"],
             init_scale=point["init_scale"], l1=point["l1"], lambda2=point["lambda2"])
    return _build(RegressionConfig, m, "model")


# -- records -------------------------------------------------------------------------

@dataclass
class RunRecord:
    experiment: str
    config: dict
    seed: int
    repeat: int = 0
    fold_metrics: dict = field(default_factory=dict)   # metric -> per-fold values
    summary: dict = field(default_factory=dict)        # metric -> Summary fields
    wall_clock_s: float = 0.0
    status: str = "ok"
    error: Optional[str] = None

    def finalize(self) -> "RunRecord":
        self.summary = {k: _summary(v).to_dict() for k, v in self.fold_metrics.items()}
        return self

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _summary(values) -> Summary:
    # undefined values (e.g. an inapplicable bound) are left out of the summary
    v = np.asarray(values, dtype=float)
    fin = v[np.isfinite(v)]
    if fin.size >= 2:
        return summarize(fin)
    mean = float(fin.mean()) if fin.size else float("nan")
    return Summary(mean, float("nan"), float("nan"), float("nan"), int(fin.size))


# -- regression ----------------------------------------------------------------------

def _regression_folds(data: Dataset, cfg: RegressionConfig, folds: int, seed: int, lambda2s,
                      standardize_features: bool = True):
    """Train once per fold and score every ridge value in ``lambda2s``.

    Closed-form mode reuses the bases across ridge values; iterative mode
    trains with ``cfg.lambda2`` only. Returns per-lambda2 metric dicts and the
    stored member predictions.
    """
    plan = kfold(len(data), folds, derive_seed(seed, "folds"))
    per_lam = {lam: {} for lam in lambda2s}
    members = []
    for f, (tri, tei) in enumerate(plan):
        train, test = data.subset(tri), data.subset(tei)
        if standardize_features:
            train, test = standardize(train, test)
        fseed = derive_seed(seed, "fold", f)
        ens = train_regression(train.features, train.targets, cfg, seed=fseed)
        Z = ens.member_predictions(test.features)
        y = np.asarray(test.targets, dtype=float)
        members.append((Z, y))
        dec = squared_loss_decomposition(Z, y)
        D_train = ens.structured(train.features)
        layer = None
        for lam in lambda2s:
            if cfg.mode == "closed-form":
                if layer is None and cfg.variant == "kmeans":
                    K = cfg.units
                    C, s = cb.kmeans_centers(D_train, min(K, len(train)), seed=derive_seed(fseed, "kmeans"))
                    layer = cb.RbfLayer(C, s, "kmeans")
                ens.combiner = fit_closed_form(D_train, train.targets, lam, cfg.variant, cfg.units,
                                               derive_seed(fseed, "kmeans"), cfg.normalize_rows, layer)
            m = per_lam[lam]
            m.setdefault("rmse_sbfn", []).append(rmse(ens.predict(test.features), y))
            m.setdefault("rmse_arith", []).append(rmse(ens.predict_arithmetic(test.features), y))
            m.setdefault("avg_member_error", []).append(dec.avg_member_error)
            m.setdefault("ambiguity", []).append(dec.ambiguity)
            m.setdefault("ensemble_error", []).append(dec.ensemble_error)
    return per_lam, members


def run_regression(data: Dataset, cfg: RegressionConfig, folds: int = 10, seed: int = 0,
                   lambda2s=None, standardize_features: bool = True, experiment: str = "regress",
                   repeat: int = 0, extra: Optional[dict] = None, catch: bool = True):
    """One record per ridge value (default: just ``cfg.lambda2``).

    With ``catch`` a failing run yields records marked ``failed`` instead of raising.
    """
    lambda2s = [cfg.lambda2] if lambda2s is None or cfg.mode == "iterative" else list(lambda2s)
    t0 = time.perf_counter()
    snap = lambda lam: {**(extra or {}), **asdict(cfg), "lambda2": lam, "folds": folds}
    try:
        per_lam, members = _regression_folds(data, cfg, folds, seed, lambda2s, standardize_features)
    except SbfnError as exc:
        if not catch:
            raise
        wall = time.perf_counter() - t0
        return [RunRecord(experiment, snap(lam), seed, repeat, wall_clock_s=wall, status="failed",
                          error=f"{type(exc).__name__}: {exc}") for lam in lambda2s], []
    wall = (time.perf_counter() - t0) / len(lambda2s)
    records = [RunRecord(experiment, snap(lam), seed, repeat, per_lam[lam], wall_clock_s=wall).finalize()
               for lam in lambda2s]
    return records, members


def _sweep_task(args):
    data, base, point_group, folds, seed, repeat, std = args
    cfg = _model_from_point(base, point_group[0])
    lams = [p["lambda2"] for p in point_group]
    try:
        records, members = run_regression(data, cfg, folds, seed, lams, std, "sweep", repeat)
    except SbfnError as exc:
        records = [RunRecord("sweep", {**point_group[0], "lambda2": lam}, seed, repeat, status="failed",
                             error=f"{type(exc).__name__}: {exc}") for lam in lams]
        members = []
    return records, members


def run_sweep(data: Dataset, grid: SweepGrid, base_model: dict, seed: int = 0, jobs: int = 1,
              standardize_features: bool = True):
    """All grid points; configurations differing only in ``lambda2`` share base training
    in closed-form mode. Records come back in grid order."""
    groups, order = {}, []
    closed = base_model.get("mode", "closed-form") == "closed-form"
    for point in grid.configs():
        key = tuple((k, v) for k, v in point.items() if not (closed and k == "lambda2"))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(point)
    tasks = []
    for repeat in range(grid.repeats):
        rseed = derive_seed(seed, "repeat", repeat) if grid.repeats > 1 else seed
        for key in order:
            tasks.append((data, base_model, groups[key], grid.folds, rseed, repeat, standardize_features))
    log.info("sweep: %d configurations x %d repeats x %d folds = %d runs",
             grid.num_configs, grid.repeats, grid.folds, grid.total_runs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(t) for t in tasks]
    # restore grid order within each repeat
    by_point = {}
    for (recs, _), task in zip(results, tasks):
        for rec, pt in zip(recs, task[2]):
            by_point[(task[5], tuple(pt.items()))] = rec
    records = []
    for repeat in range(grid.repeats):
        for pt in grid.configs():
            rec = by_point[(repeat, tuple(pt.items()))]
            rec.config = {**rec.config, "grid_point": pt}
            records.append(rec)
    return records


# -- classification --------------------------------------------------------------------

def run_classification(data: Dataset, cfg: ClassificationConfig, splits: int = 5,
                       test_fraction: float = 0.25, seed: int = 0,
                       standardize_features: bool = True, experiment: str = "classify",
                       catch: bool = True):
    """Holdout splits; all combiners scored on identical splits.

    Returns the record and, per split, the test member probabilities and targets.
    """
    if splits < 1 or not 0 < test_fraction < 1:
        raise ConfigurationError("splits >= 1 and 0 < test_fraction < 1 required")
    y_all = np.asarray(data.targets, dtype=int)
    C = int(y_all.max()) + 1
    t0 = time.perf_counter()
    metrics, members = {}, []
    snap = {**asdict(cfg), "splits": splits, "test_fraction": test_fraction, "num_classes": C}
    try:
        for s in range(splits):
            tri, tei = holdout_split(len(data), test_fraction, derive_seed(seed, "split", s))
            train, test = data.subset(tri), data.subset(tei)
            if standardize_features:
                train, test = standardize(train, test)
            rseed = derive_seed(seed, "run", s)
            ens = train_classification(train.features, train.targets, C, cfg, seed=rseed)
            res = evaluate_classification(ens, train, test, cfg, seed=rseed)
            members.append((softmax(ens.member_logits(test.features)), res["_targets"]))
            for k, v in res.items():
                if not k.startswith("_"):
                    metrics.setdefault(k, []).append(float("nan") if v is None else float(v))
    except SbfnError as exc:
        if not catch:
            raise
        return RunRecord(experiment, snap, seed, wall_clock_s=time.perf_counter() - t0, status="failed",
                         error=f"{type(exc).__name__}: {exc}"), []
    return RunRecord(experiment, snap, seed, 0, metrics, wall_clock_s=time.perf_counter() - t0).finalize(), members


# -- synthetic centre-placement study ------------------------------------------------------

SYNTH_SIZES = (2, 5, 10, 20, 50)


def run_synth(seed: int = 0, runs: int = 5, sizes=SYNTH_SIZES, lambda2: float = 1e-2,
              n_train: int = 300, n_test: int = 1000, noise_std: float = 0.1):
    """Radial-basis regression on the input space with grid (GBF) or KMeans centres.

    Returns aggregate rows (one per strategy and size), per-run rows and centre rows.
    """
    per_run, centres = [], []
    for r in range(runs):
        rseed = derive_seed(seed, "synth", r)
        train, test = synth_sine(n_train, n_test, noise_std, rseed)
        for M in sizes:
            for strategy in ("GBF", "RBF-KMeans"):
                if strategy == "GBF":
                    C, s = cb.grid_centers(train.features, M)
                    layer = cb.RbfLayer(C, s, "fixed")
                else:
                    C, s = cb.kmeans_centers(train.features, M, seed=derive_seed(rseed, "kmeans", M))
                    layer = cb.RbfLayer(C, s, "kmeans")
                alpha = cb.ridge_solve(cb.feature_matrix(train.features, layer), train.targets, lambda2)
                pred = cb.feature_matrix(test.features, layer) @ alpha
                per_run.append({"strategy": strategy, "M": M, "run": r, "seed": rseed,
                                "rmse": rmse(pred, test.targets)})
                for k in range(M):
                    centres.append({"strategy": strategy, "M": M, "run": r, "unit": k,
                                    **{f"c{i + 1}": float(v) for i, v in enumerate(C[k])},
                                    "scale": float(s[k])})
    agg = []
    for strategy in ("GBF", "RBF-KMeans"):
        for M in sizes:
            v = [row["rmse"] for row in per_run if row["strategy"] == strategy and row["M"] == M]
            sm = _summary(v)
            agg.append({"strategy": strategy, "M": M, "mean_rmse": sm.mean, "std_rmse": sm.std,
                        "half_width_95": sm.half_width_95, "runs": len(v)})
    return agg, per_run, centres


# -- diagnostics -------------------------------------------------------------------------

DIAG_COLUMNS = ("record", "experiment", "epsilon", "num_models", "gibbs_risk", "expected_disagreement",
                "majority_vote_error", "joint_error", "c_bound", "avg_member_error", "ambiguity",
                "ensemble_error")


def diagnostics_rows(records, members_by_record) -> list:
    """Per record, pooled over folds/splits: vote diagnostics (classification)
    and the ambiguity decomposition of the stored member outputs."""
    rows = []
    for i, (rec, members) in enumerate(zip(records, members_by_record)):
        if not members:
            continue
        row = {"record": i, "experiment": rec.experiment, "epsilon": rec.config.get("epsilon"),
               "num_models": rec.config.get("num_models")}
        Z = np.concatenate([m[0] for m in members])
        y = np.concatenate([m[1] for m in members])
        if Z.ndim == 3:   # N x M x C member probabilities
            C = Z.shape[2]
            rep = disagreement_report(Z.argmax(axis=2), y.astype(int), C)
            row.update(rep.to_dict())
            onehot = np.eye(C)[y.astype(int)]
            parts = [squared_loss_decomposition(Z[:, :, c], onehot[:, c]) for c in range(C)]
            row.update(avg_member_error=sum(p.avg_member_error for p in parts),
                       ambiguity=sum(p.ambiguity for p in parts),
                       ensemble_error=sum(p.ensemble_error for p in parts))
        else:
            row.update(squared_loss_decomposition(Z, y).to_dict())
        rows.append(row)
    return rows


# -- output ------------------------------------------------------------------------------

def new_run_dir(out: str | Path, experiment: str) -> Path:
    base = Path(out) / experiment / datetime.now().strftime("%Y%m%d-%H%M%S")
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        elif isinstance(v, (list, tuple)):
            out[prefix + k] = json.dumps(_jsonable(v))
        else:
            out[prefix + k] = v
    return out


def records_table(records) -> list:
    rows = []
    for i, r in enumerate(records):
        row = {"record": i, "experiment": r.experiment, "status": r.status, "seed": r.seed,
               "repeat": r.repeat, **_flat(r.config, "config.")}
        for name, sm in r.summary.items():
            row[f"{name}.mean"] = sm["mean"]
            row[f"{name}.std"] = sm["std"]
            row[f"{name}.hw90"] = sm["half_width_90"]
            row[f"{name}.hw95"] = sm["half_width_95"]
            row[f"{name}.folds"] = ";".join(repr(float(v)) for v in r.fold_metrics[name])
        row["wall_clock_s"] = r.wall_clock_s
        row["error"] = r.error or ""
        rows.append(row)
    return rows


def write_csv(path, rows, columns=None) -> None:
    if columns is None:
        columns = []
        for row in rows:
            columns += [k for k in row if k not in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(row.get(k)) for k in columns})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(float(v)) else repr(float(v))
    return v


def write_run(run_dir: Path, records, members_by_record, config: dict) -> None:
    """records.csv, records.json, diagnostics.csv, config.json and stored member outputs."""
    (run_dir / "config.json").write_text(json.dumps(_jsonable(config), indent=2))
    (run_dir / "records.json").write_text(json.dumps([r.to_dict() for r in records], indent=1))
    write_csv(run_dir / "records.csv", records_table(records))
    arrays = {}
    for i, members in enumerate(members_by_record):
        for f, (Z, y) in enumerate(members):
            arrays[f"r{i}_f{f}_members"] = Z
            arrays[f"r{i}_f{f}_targets"] = y
    np.savez_compressed(run_dir / "members.npz", **arrays)
    write_csv(run_dir / "diagnostics.csv", diagnostics_rows(records, members_by_record), DIAG_COLUMNS)


def load_run(run_dir) -> tuple:
    """Records and stored member outputs of a finished run directory."""
    run_dir = Path(run_dir)
    rec_path, mem_path = run_dir / "records.json", run_dir / "members.npz"
    if not rec_path.exists() or not mem_path.exists():
        raise FileNotFoundError(f"{run_dir} has no records.json/members.npz")
    try:
        raw = json.loads(rec_path.read_text())
        records = [RunRecord(**r) for r in raw]
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"unreadable records.json: {exc}") from None
    members = [[] for _ in records]
    with np.load(mem_path) as npz:
        keys = sorted((k for k in npz.files if k.endswith("_members")),
                      key=lambda k: tuple(int(p[1:]) for p in k.split("_")[:2]))
        for k in keys:
            i = int(k.split("_")[0][1:])
            members[i].append((npz[k], npz[k.replace("_members", "_targets")]))
    return records, members
