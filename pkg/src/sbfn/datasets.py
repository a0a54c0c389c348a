"""Data ingestion, standardisation, fold plans and synthetic generators."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataFormatError

log = logging.getLogger(__name__)

STD_FLOOR = 1e-12
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: Optional[list] = None
    standardization: Optional[tuple] = None  # (mean, std) already applied to features

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.targets = np.asarray(self.targets)
        if len(self.features) != len(self.targets):
            raise ConfigurationError(f"{len(self.features)} feature rows vs {len(self.targets)} targets")
        if np.isnan(self.features).any():
            raise DataFormatError("features contain NaN")

    def __len__(self):
        return len(self.targets)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], targets=self.targets[idx])

    def to_csv(self, path, target_column: str = "target") -> None:
        names = self.feature_names or [f"x{i}" for i in range(self.num_features)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([*names, target_column])
            for row, t in zip(self.features, self.targets):
                w.writerow([repr(float(v)) for v in row] + [repr(t.item())])


def fit_standardizer(features: np.ndarray):
    mu = features.mean(axis=0)
    sd = np.maximum(features.std(axis=0), STD_FLOOR)
    return mu, sd


def standardize(train: Dataset, *others: Dataset):
    """z-score every dataset with statistics of ``train`` only."""
    mu, sd = fit_standardizer(train.features)
    out = [replace(d, features=(d.features - mu) / sd, standardization=(mu, sd)) for d in (train, *others)]
    return out[0] if not others else tuple(out)


def load_csv(path, target_column: str, delimiter: str = ",", missing_markers: Sequence[str] = ("",),
             decimal: str = ".", drop_columns: Sequence[str] = ()) -> Dataset:
    """Read a headed CSV of numeric columns.

    Rows containing any missing marker are dropped (count logged). Features
    are returned unstandardised; standardise per training split with
    :func:`standardize`.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise DataFormatError(f"{path}: empty file", offset=(0, 0))
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise ConfigurationError(f"target column {target_column!r} not in header {header}")
    keep = [i for i, h in enumerate(header) if h and h not in drop_columns]
    markers = {m.strip() for m in missing_markers}
    data, dropped = [], 0
    for r, row in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in row):
            continue
        cells = [row[i].strip() if i < len(row) else "" for i in keep]
        if any(c in markers for c in cells):
            dropped += 1
            continue
        vals = []
        for i, c in zip(keep, cells):
            try:
                vals.append(float(c.replace(decimal, ".") if decimal != "." else c))
            except ValueError:
                raise DataFormatError(f"{path}: non-numeric cell {c!r} at row {r}, column {header[i]!r}",
                                      offset=(r, header[i])) from None
        if any(v in _numeric_markers(markers) for v in vals):
            dropped += 1
            continue
        data.append(vals)
    if dropped:
        log.info("%s: dropped %d rows with missing values", path.name, dropped)
    names = [header[i] for i in keep]
    arr = np.array(data, dtype=float).reshape(len(data), len(names))
    t = names.index(target_column)
    feats = np.delete(arr, t, axis=1)
    return Dataset(feats, arr[:, t], [n for n in names if n != target_column])


def _numeric_markers(markers):
    out = set()
    for m in markers:
        try:
            out.add(float(m))
        except ValueError:
            pass
    return out


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray

    def split(self, fold: int):
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test

    def __iter__(self):
        return (self.split(f) for f in range(self.k))


def kfold(n: int, k: int, seed: int = 0) -> FoldPlan:
    """Random permutation cut into ``k`` folds whose sizes differ by at most one."""
    if k < 1 or k > n:
        raise ConfigurationError(f"need 1 <= k <= n (k={k}, n={n})")
    perm = np.random.default_rng(seed).permutation(n)
    assign = np.empty(n, dtype=int)
    for f, chunk in enumerate(np.array_split(perm, k)):
        assign[chunk] = f
    return FoldPlan(k, assign)


def holdout_split(n: int, test_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def synth_sine(n_train: int = 300, n_test: int = 1000, noise_std: float = 0.1, seed: int = 0,
               distractors: int = 0):
    """``y = sin(x1) + cos(x2) + noise`` with ``x ~ U[-3, 3]^2``.

    ``distractors`` appends that many irrelevant U[-3, 3] columns.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigurationError("n_train and n_test must be >= 1")
    rng = np.random.default_rng(seed)

    def draw(n):
        X = rng.uniform(-3.0, 3.0, size=(n, 2 + distractors))
        y = np.sin(X[:, 0]) + np.cos(X[:, 1])
        if noise_std > 0:
            y = y + rng.normal(0.0, noise_std, size=n)
        return Dataset(X, y, [f"x{i + 1}" for i in range(X.shape[1])])

    return draw(n_train), draw(n_test)


def gaussian_blobs(n: int = 600, num_classes: int = 3, dim: int = 2, spread: float = 1.0,
                   separation: float = 2.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, on a random set of means."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(num_classes, dim))
    y = rng.integers(num_classes, size=n)
    X = means[y] + rng.normal(0.0, spread, size=(n, dim))
    return Dataset(X, y.astype(int))


# -- IDX --------------------------------------------------------------------------

def _read_idx(path, expected_magic: int):
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: no such file")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataFormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    need = int(np.prod(dims))
    if len(raw) - hdr < need:
        raise DataFormatError(f"{path}: truncated payload, expected {need} bytes after header",
                              offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=hdr).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write ``uint8`` data in IDX layout (3-D images or 1-D labels)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_idx(images_path, labels_path, downsample_factor: int = 1, limit: Optional[int] = None) -> Dataset:
    """Images scaled to [0, 1], average-pooled by an integer factor, flattened."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(imgs) != len(labels):
        raise DataFormatError(f"{len(imgs)} images vs {len(labels)} labels")
    if limit is not None:
        imgs, labels = imgs[:limit], labels[:limit]
    x = imgs.astype(float) / 255.0
    f = int(downsample_factor)
    if f < 1:
        raise ConfigurationError("downsample_factor must be >= 1")
    if f > 1:
        n, h, w = x.shape
        h2, w2 = h // f, w // f
        x = x[:, : h2 * f, : w2 * f].reshape(n, h2, f, w2, f).mean(axis=(2, 4))
    return Dataset(x.reshape(len(x), -1), labels.astype(int))
