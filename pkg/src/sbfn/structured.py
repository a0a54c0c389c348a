"""Structured dataset: per-instance concatenation of base-predictor outputs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataFormatError, NumericError, ShapeError


@dataclass(frozen=True)
class GeometryKind:
    tag: str = "euclidean"
    num_classes: int = 1

    def __post_init__(self):
        if self.tag not in ("euclidean", "simplex"):
            raise ConfigurationError(f"unknown geometry {self.tag!r}")
        if self.tag == "simplex" and self.num_classes < 2:
            raise ConfigurationError("simplex geometry needs num_classes >= 2")

    @property
    def block_size(self) -> int:
        return self.num_classes if self.tag == "simplex" else 1

    def to_dict(self) -> dict:
        return {"tag": self.tag, "num_classes": self.num_classes}


EUCLIDEAN = GeometryKind("euclidean")


def simplex(num_classes: int) -> GeometryKind:
    return GeometryKind("simplex", num_classes)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=float)
    if z.size == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def build_row_euclidean(predictions) -> np.ndarray:
    row = np.asarray(predictions, dtype=float).ravel()
    if row.size == 0:
        raise ShapeError("need at least one prediction")
    bad = np.flatnonzero(~np.isfinite(row))
    if bad.size:
        raise NumericError(f"non-finite prediction from model {bad[0]}", index=int(bad[0]))
    return row.copy()


def build_row_simplex(logits_per_model: Sequence) -> np.ndarray:
    """Concatenate ``softmax(logits_j)`` blocks in model order."""
    sizes = {len(l) for l in logits_per_model}
    if len(sizes) != 1:
        raise ShapeError(f"inconsistent class counts across models: {sorted(sizes)}")
    return np.concatenate([softmax(l) for l in logits_per_model])


@dataclass
class StructuredMatrix:
    """``N x d_D`` matrix of structured rows under one geometry."""

    values: np.ndarray
    geometry: GeometryKind = EUCLIDEAN

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        bs = self.geometry.block_size
        if self.values.shape[1] % bs:
            raise ShapeError(f"row width {self.values.shape[1]} not a multiple of {bs}")
        if self.geometry.tag == "simplex":
            blocks = self.blocks()
            if np.any(blocks < 0) or np.max(np.abs(blocks.sum(axis=2) - 1.0), initial=0.0) > 1e-9:
                raise ShapeError("simplex rows must hold probability blocks")

    @property
    def num_models(self) -> int:
        return self.values.shape[1] // self.geometry.block_size

    def blocks(self) -> np.ndarray:
        """View as ``N x M x C`` (``C = 1`` for Euclidean)."""
        N = self.values.shape[0]
        return self.values.reshape(N, self.num_models, self.geometry.block_size)

    def __len__(self):
        return self.values.shape[0]

    def header(self) -> list:
        if self.geometry.tag == "euclidean":
            return [f"m{j}" for j in range(self.num_models)]
        return [f"m{j}_c{k}" for j in range(self.num_models) for k in range(self.geometry.num_classes)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "StructuredMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataFormatError(f"{path}: empty file")
        head = rows[0]
        try:
            vals = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        if "_c" in head[0]:
            C = len({h.split("_c")[1] for h in head})
            geom = simplex(C)
        else:
            geom = EUCLIDEAN
        return cls(vals.reshape(len(rows) - 1, len(head)), geom)


def euclidean_matrix(predictions: np.ndarray) -> StructuredMatrix:
    """Plug-in construction from an ``N x M`` array of scalar predictions."""
    P = np.asarray(predictions, dtype=float)
    if not np.all(np.isfinite(P)):
        j = int(np.argwhere(~np.isfinite(P))[0, 1])
        raise NumericError(f"non-finite prediction from model {j}", index=j)
    return StructuredMatrix(P, EUCLIDEAN)


def simplex_matrix(logits: np.ndarray) -> StructuredMatrix:
    """Plug-in construction from ``N x M x C`` logits."""
    L = np.asarray(logits, dtype=float)
    N, M, C = L.shape
    return StructuredMatrix(softmax(L).reshape(N, M * C), simplex(C))
