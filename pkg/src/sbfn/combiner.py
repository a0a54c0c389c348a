"""Radial-basis combiner over structured rows.

A layer of ``K`` radial units maps each structured row to ``K`` features; a
linear head ``alpha`` turns features into a scalar (Euclidean geometry) or
into ``C`` logits that are divided by a temperature and softmaxed (simplex
geometry).

Two families of layers exist:

* ``G1``/``G2``/``G3``: one univariate unit per base predictor (``K = M``),
  centred on running moments of that predictor's outputs.
* ``kmeans``/``fixed``: full-width units with centres in ``R^{d_D}``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, NumericError, ShapeError, SolverError
from .structured import EUCLIDEAN, GeometryKind, StructuredMatrix, softmax

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
SUM_FLOOR = 1e-12
LAYERNORM_EPS = 1e-5
UNIVARIATE_VARIANTS = ("G1", "G2", "G3")
VARIANTS = UNIVARIATE_VARIANTS + ("kmeans", "fixed")


def gaussian_unit(u, center, scale: float, scale_floor: float = SCALE_FLOOR) -> float:
    """``exp(-||u - center||^2 / (2 scale^2))`` with ``scale`` clamped to the floor."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if u.shape != center.shape:
        raise ShapeError(f"unit input {u.shape} vs centre {center.shape}")
    if scale < scale_floor:
        log.debug("scale %g clamped to floor %g", scale, scale_floor)
        scale = scale_floor
    r2 = float(np.sum((u - center) ** 2))
    return float(np.exp(-0.5 * r2 / (scale * scale)))


def dispersion_unit(u, center, scale: float, scale_floor: float = SCALE_FLOOR) -> float:
    """G3 profile: ``||u - center||^2 / scale``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if u.shape != center.shape:
        raise ShapeError(f"unit input {u.shape} vs centre {center.shape}")
    return float(np.sum((u - center) ** 2) / max(scale, scale_floor))


@dataclass
class RbfLayer:
    centers: np.ndarray                 # K x dim (dim = 1 for univariate variants)
    scales: np.ndarray                  # K
    variant: str = "kmeans"
    window: int = 20
    scale_floor: float = SCALE_FLOOR
    # running moments (univariate variants only)
    count: int = 0
    mean: Optional[np.ndarray] = None   # G1 Welford state
    m2: Optional[np.ndarray] = None
    buffer: Optional[np.ndarray] = None  # G2/G3 ring buffer, window x M
    filled: int = 0
    pos: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if not self.scale_floor > 0:
            raise ConfigurationError("scale_floor must be > 0")
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.scales = np.maximum(np.asarray(self.scales, dtype=float).ravel(), self.scale_floor)
        if self.scales.shape[0] != self.centers.shape[0]:
            raise ShapeError("one scale per centre required")

    @property
    def num_units(self) -> int:
        return self.centers.shape[0]

    @property
    def univariate(self) -> bool:
        return self.variant in UNIVARIATE_VARIANTS

    @classmethod
    def running(cls, variant: str, num_models: int, window: int = 20,
                scale_floor: float = SCALE_FLOOR) -> "RbfLayer":
        """Fresh per-predictor layer with empty moments."""
        if variant not in UNIVARIATE_VARIANTS:
            raise ConfigurationError(f"{variant!r} is not a running-moments variant")
        layer = cls(np.zeros((num_models, 1)), np.full(num_models, scale_floor), variant,
                    window, scale_floor)
        layer.mean = np.zeros(num_models)
        layer.m2 = np.zeros(num_models)
        layer.buffer = np.zeros((window, num_models))
        return layer

    def copy(self) -> "RbfLayer":
        cp = lambda a: None if a is None else a.copy()
        return RbfLayer(self.centers.copy(), self.scales.copy(), self.variant, self.window,
                        self.scale_floor, self.count, cp(self.mean), cp(self.m2),
                        cp(self.buffer), self.filled, self.pos)


# -- running moments -----------------------------------------------------------

def g3_scales(predictions, scale_floor: float = SCALE_FLOOR) -> np.ndarray:
    """``max_{p != j} |z_j - z_p| / sqrt(M)`` for every predictor ``j``."""
    z = np.asarray(predictions, dtype=float).ravel()
    M = z.size
    if M < 2:
        return np.full(M, scale_floor)
    # the farthest other prediction is always an extreme of the row
    disp = np.maximum(np.abs(z - z.max()), np.abs(z - z.min())) / np.sqrt(M)
    return np.maximum(disp, scale_floor)


def update_moments(layer: RbfLayer, predictions, all_predictions=None) -> RbfLayer:
    """Fold one step of base outputs into the layer's centres and scales (in place).

    ``all_predictions`` is the full cross-predictor row used by G3's scale;
    it defaults to ``predictions``.
    """
    if not layer.univariate:
        raise ConfigurationError("update_moments only applies to G1/G2/G3 layers")
    z = np.asarray(predictions, dtype=float).ravel()
    if z.size != layer.num_units:
        raise ShapeError(f"expected {layer.num_units} predictions, got {z.size}")
    layer.count += 1
    if layer.variant == "G1":
        d = z - layer.mean
        layer.mean += d / layer.count
        layer.m2 += d * (z - layer.mean)
        layer.centers[:, 0] = layer.mean
        if layer.count >= 2:
            layer.scales = np.maximum(np.sqrt(layer.m2 / (layer.count - 1)), layer.scale_floor)
        else:
            layer.scales = np.full(z.size, layer.scale_floor)
        return layer

    layer.buffer[layer.pos] = z
    layer.pos = (layer.pos + 1) % layer.window
    layer.filled = min(layer.filled + 1, layer.window)
    recent = layer.buffer[: layer.filled]
    layer.centers[:, 0] = recent.mean(axis=0)
    if layer.variant == "G2":
        if layer.filled >= 2:
            layer.scales = np.maximum(recent.std(axis=0, ddof=1), layer.scale_floor)
        else:
            layer.scales = np.full(z.size, layer.scale_floor)
    else:
        row = z if all_predictions is None else all_predictions
        layer.scales = g3_scales(row, layer.scale_floor)
    return layer


# -- feature map ------------------------------------------------------------------

def _normalize(H: np.ndarray, kind: Optional[str]) -> np.ndarray:
    if not kind:
        return H
    if kind == "sum":
        return H / np.maximum(H.sum(axis=1, keepdims=True), SUM_FLOOR)
    if kind == "layernorm":
        mu = H.mean(axis=1, keepdims=True)
        sd = np.sqrt(H.var(axis=1, keepdims=True) + LAYERNORM_EPS)
        return (H - mu) / sd
    raise ConfigurationError(f"unknown row normalisation {kind!r}")


def _normalize_vjp(H: np.ndarray, Hn: np.ndarray, g: np.ndarray, kind: Optional[str]) -> np.ndarray:
    if not kind:
        return g
    if kind == "sum":
        S = H.sum(axis=1, keepdims=True)
        clamped = S < SUM_FLOOR
        S = np.maximum(S, SUM_FLOOR)
        out = (g - np.sum(g * Hn, axis=1, keepdims=True)) / S
        return np.where(clamped, g / SUM_FLOOR, out)
    sd = np.sqrt(H.var(axis=1, keepdims=True) + LAYERNORM_EPS)
    return (g - g.mean(axis=1, keepdims=True) - Hn * np.mean(g * Hn, axis=1, keepdims=True)) / sd


def _raw_features(rows: np.ndarray, layer: RbfLayer) -> np.ndarray:
    rows = np.atleast_2d(rows)
    if layer.univariate:
        if rows.shape[1] != layer.num_units:
            raise ShapeError(f"row width {rows.shape[1]} != {layer.num_units} univariate units")
        diff2 = (rows - layer.centers[:, 0]) ** 2
        if layer.variant == "G3":
            scales = np.stack([g3_scales(r, layer.scale_floor) for r in rows])
            return diff2 / scales
        return np.exp(-0.5 * diff2 / layer.scales ** 2)
    if rows.shape[1] != layer.centers.shape[1]:
        raise ShapeError(f"row width {rows.shape[1]} != centre width {layer.centers.shape[1]}")
    d2 = _sqdist(rows, layer.centers)
    return np.exp(-0.5 * d2 / layer.scales ** 2)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # direct differences: the expanded form cancels badly near a centre
    return ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)


def feature_matrix(rows, layer: RbfLayer, normalize: Optional[str] = None) -> np.ndarray:
    """``N x K`` radial features; ``normalize`` is None, ``"sum"`` or ``"layernorm"``."""
    rows = rows.values if isinstance(rows, StructuredMatrix) else np.asarray(rows, dtype=float)
    return _normalize(_raw_features(rows, layer), normalize)


def feature_map(row, layer: RbfLayer, normalize_rows: bool = False,
                norm_kind: str = "sum") -> np.ndarray:
    """Features of a single structured row."""
    row = np.asarray(row, dtype=float).ravel()
    return feature_matrix(row[None, :], layer, norm_kind if normalize_rows else None)[0]


# -- centre placement -----------------------------------------------------------

def _farthest_point_seeds(X: np.ndarray, K: int, rng) -> np.ndarray:
    idx = [int(rng.integers(len(X)))]
    d2 = ((X - X[idx[0]]) ** 2).sum(1)
    for _ in range(1, K):
        nxt = int(np.argmax(d2))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(1))
    return X[idx].copy()


def kmeans_centers(rows, K: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8,
                   scale_floor: float = SCALE_FLOOR, n_init: int = 10):
    """Lloyd's algorithm from greedy farthest-point seeds.

    ``n_init`` seedings (each from a different random first point) are run
    and the one with the lowest within-cluster sum of squares is kept.
    Returns ``(centers, scales)``; each scale is the mean distance of a
    cluster's members to its centre.
    """
    X = rows.values if isinstance(rows, StructuredMatrix) else np.asarray(rows, dtype=float)
    X = np.atleast_2d(X)
    N = len(X)
    if K < 1 or N < K:
        raise ConfigurationError(f"kmeans needs 1 <= K <= N (K={K}, N={N})")
    if n_init < 1:
        raise ConfigurationError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best, best_wcss = None, np.inf
    for _ in range(n_init):
        C = _lloyd(X, _farthest_point_seeds(X, K, rng), max_iter, tol)
        wcss = float(_sqdist(X, C).min(axis=1).sum())
        if wcss < best_wcss:
            best, best_wcss = C, wcss
    return best, cluster_scales(X, best, scale_floor)


def kmeans_refine(rows, centers, max_iter: int = 300, tol: float = 1e-8,
                  scale_floor: float = SCALE_FLOOR):
    """Lloyd's algorithm warm-started at ``centers``; unit order is preserved."""
    X = rows.values if isinstance(rows, StructuredMatrix) else np.asarray(rows, dtype=float)
    X = np.atleast_2d(X)
    C = np.array(centers, dtype=float)
    if C.ndim != 2 or C.shape[1] != X.shape[1]:
        raise ShapeError(f"centers {C.shape} do not match rows of width {X.shape[1]}")
    C = _lloyd(X, C, max_iter, tol)
    return C, cluster_scales(X, C, scale_floor)


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int, tol: float) -> np.ndarray:
    K = len(C)
    for _ in range(max_iter):
        assign = np.argmin(_sqdist(X, C), axis=1)
        newC = C.copy()
        for k in range(K):
            members = X[assign == k]
            if len(members):
                newC[k] = members.mean(axis=0)
            else:
                # empty cluster: reseed at the point farthest from its old centre
                far = int(np.argmax(((X - C[k]) ** 2).sum(1)))
                newC[k] = X[far]
        shift = float(np.max(np.sqrt(((newC - C) ** 2).sum(1))))
        C = newC
        if shift < tol:
            break
    return C


def cluster_scales(X: np.ndarray, C: np.ndarray, scale_floor: float = SCALE_FLOOR) -> np.ndarray:
    """Mean member distance per centre; empty clusters get the global mean distance."""
    d = np.sqrt(_sqdist(X, C))
    assign = np.argmin(d, axis=1)
    own = d[np.arange(len(X)), assign]
    global_mean = float(own.mean())
    scales = np.empty(len(C))
    for k in range(len(C)):
        m = assign == k
        scales[k] = own[m].mean() if m.any() else global_mean
    return np.maximum(scales, scale_floor)


def grid_centers(X, M: int, scale_floor: float = SCALE_FLOOR):
    """``M`` centres on an evenly spaced cell-centred grid over the data's bounding box.

    Only the box (per-dimension min/max) is read from ``X``. For two
    dimensions the grid shape is the most nearly square factorisation of
    ``M``; the shared scale is the mean grid spacing.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = X.shape[1]
    lo, hi = X.min(axis=0), X.max(axis=0)
    counts = _grid_shape(M, d)
    axes = [lo[i] + (np.arange(n) + 0.5) * (hi[i] - lo[i]) / n for i, n in enumerate(counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    C = np.stack([m.ravel() for m in mesh], axis=1)
    spacing = float(np.mean([(hi[i] - lo[i]) / n for i, n in enumerate(counts)]))
    return C, np.full(M, max(spacing, scale_floor))


def _grid_shape(M: int, d: int) -> list:
    if d == 1:
        return [M]
    counts = [1] * d
    rest = M
    # peel off the largest divisor not exceeding the balanced share, smallest dims first
    for i in range(d - 1):
        target = round(rest ** (1.0 / (d - i)))
        f = max(k for k in range(1, max(target, 1) + 1) if rest % k == 0)
        counts[i] = f
        rest //= f
    counts[-1] = rest
    return counts


# -- linear head ----------------------------------------------------------------------

@dataclass
class CombinerWeights:
    alpha: np.ndarray               # K (regression) or K x C
    temperature: float = 1.0
    normalize_rows: bool = False
    norm_kind: str = "sum"

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if not np.all(np.isfinite(self.alpha)):
            raise NumericError("non-finite combiner weights")

    @property
    def norm(self) -> Optional[str]:
        return self.norm_kind if self.normalize_rows else None


def ridge_solve(features, targets, lambda2: float) -> np.ndarray:
    """``(F^T F + lambda2 I)^{-1} F^T y`` via a Cholesky factorisation."""
    F = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if lambda2 < 0:
        raise ConfigurationError("lambda2 must be >= 0")
    if F.shape[0] != y.shape[0]:
        raise ShapeError(f"{F.shape[0]} feature rows vs {y.shape[0]} targets")
    A = F.T @ F + lambda2 * np.eye(F.shape[1])
    rhs = F.T @ y
    try:
        alpha = linalg.cho_solve(linalg.cho_factor(A, lower=True), rhs)
    except linalg.LinAlgError as exc:
        raise SolverError(f"normal equations not positive definite ({exc}); use lambda2 > 0") from exc
    res = np.linalg.norm(A @ alpha - rhs)
    if not np.all(np.isfinite(alpha)) or res > 1e-8 * max(np.linalg.norm(rhs), 1e-300):
        raise SolverError(f"ridge residual {res:.3g} too large (ill-conditioned); use lambda2 > 0")
    return alpha


def sgd_step_regression(alpha, features_batch, targets_batch, eta_alpha: float,
                        lambda2: float) -> np.ndarray:
    """``alpha - eta * [(1/b) F^T (F alpha - y) + lambda2 alpha]``."""
    F = np.atleast_2d(np.asarray(features_batch, dtype=float))
    y = np.atleast_1d(np.asarray(targets_batch, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    if F.shape[0] != y.shape[0] or F.shape[1] != alpha.shape[0]:
        raise ShapeError("inconsistent batch shapes")
    with np.errstate(over="ignore", invalid="ignore"):
        new = alpha - eta_alpha * (F.T @ (F @ alpha - y) / len(y) + lambda2 * alpha)
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite combiner update")
    return new


def sgd_step_classification(alpha, features_batch, onehot_batch, eta_alpha: float,
                            temperature: float) -> np.ndarray:
    """One cross-entropy step on ``softmax(F alpha / T)``."""
    F = np.atleast_2d(np.asarray(features_batch, dtype=float))
    Y = np.atleast_2d(np.asarray(onehot_batch, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    if temperature <= 0:
        raise ConfigurationError("temperature must be > 0")
    if F.shape[0] != Y.shape[0] or alpha.shape != (F.shape[1], Y.shape[1]):
        raise ShapeError("inconsistent batch shapes")
    P = softmax(F @ alpha / temperature)
    new = alpha - eta_alpha * (F.T @ (P - Y)) / (len(F) * temperature)
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite combiner update")
    return new


def classification_loss_grads(rows, labels, layer: RbfLayer, weights: CombinerWeights):
    """Mean cross-entropy and its gradients w.r.t. ``alpha`` and the centres."""
    U = np.atleast_2d(np.asarray(rows, dtype=float))
    labels = np.asarray(labels, dtype=int)
    b = len(U)
    H = _raw_features(U, layer)
    Hn = _normalize(H, weights.norm)
    T = weights.temperature
    P = softmax(Hn @ weights.alpha / T)
    loss = float(-np.mean(np.log(np.maximum(P[np.arange(b), labels], 1e-300))))
    G = P.copy()
    G[np.arange(b), labels] -= 1.0
    G /= b
    g_alpha = Hn.T @ G / T
    gHn = G @ weights.alpha.T / T
    gH = _normalize_vjp(H, Hn, gHn, weights.norm)
    if layer.univariate:
        return loss, g_alpha, None
    coef = gH * H / layer.scales ** 2                   # b x K
    g_centers = coef.T @ U - coef.sum(axis=0)[:, None] * layer.centers
    return loss, g_alpha, g_centers


def gradient_step_centers(layer: RbfLayer, grad_centers, eta: float) -> RbfLayer:
    """Return a copy of ``layer`` with centres moved one step against ``grad_centers``."""
    if layer.univariate:
        raise ConfigurationError("centre gradients apply to kmeans/fixed layers")
    g = np.asarray(grad_centers, dtype=float)
    if g.shape != layer.centers.shape:
        raise ShapeError("gradient shape does not match centres")
    out = layer.copy()
    out.centers = layer.centers - eta * g
    if not np.all(np.isfinite(out.centers)):
        raise NumericError("non-finite centre update")
    return out


# -- prediction ---------------------------------------------------------------------------

def predict_regression(row, layer: RbfLayer, weights: CombinerWeights) -> float:
    phi = feature_map(row, layer, weights.normalize_rows, weights.norm_kind)
    if phi.shape[0] != weights.alpha.shape[0]:
        raise ShapeError("alpha length does not match number of units")
    return float(phi @ weights.alpha)


def predict_regression_batch(rows, layer: RbfLayer, weights: CombinerWeights) -> np.ndarray:
    return feature_matrix(rows, layer, weights.norm) @ weights.alpha


def predict_classification(row, layer: RbfLayer, weights: CombinerWeights) -> np.ndarray:
    phi = feature_map(row, layer, weights.normalize_rows, weights.norm_kind)
    if weights.alpha.ndim != 2 or phi.shape[0] != weights.alpha.shape[0]:
        raise ShapeError("alpha must be K x C")
    return softmax(phi @ weights.alpha / weights.temperature)


def predict_classification_batch(rows, layer: RbfLayer, weights: CombinerWeights) -> np.ndarray:
    return softmax(feature_matrix(rows, layer, weights.norm) @ weights.alpha / weights.temperature)


# -- serialisation -----------------------------------------------------------------------

@dataclass
class TrainedCombiner:
    layer: RbfLayer
    weights: CombinerWeights
    geometry: GeometryKind = field(default_factory=lambda: EUCLIDEAN)

    def to_dict(self) -> dict:
        return {
            "variant": self.layer.variant,
            "centers": self.layer.centers.tolist(),
            "scales": self.layer.scales.tolist(),
            "alpha": self.weights.alpha.tolist(),
            "temperature": self.weights.temperature,
            "normalize_rows": self.weights.normalize_rows,
            "norm_kind": self.weights.norm_kind,
            "window": self.layer.window,
            "scale_floor": self.layer.scale_floor,
            "geometry": self.geometry.to_dict(),
        }

    def to_json(self) -> str:
        # json writes floats with repr(), which round-trips doubles exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedCombiner":
        layer = RbfLayer(np.asarray(d["centers"], dtype=float), np.asarray(d["scales"], dtype=float),
                         d["variant"], d.get("window", 20), d.get("scale_floor", SCALE_FLOOR))
        weights = CombinerWeights(np.asarray(d["alpha"], dtype=float), d["temperature"],
                                  d.get("normalize_rows", False), d.get("norm_kind", "sum"))
        g = d.get("geometry", {"tag": "euclidean", "num_classes": 1})
        return cls(layer, weights, GeometryKind(g["tag"], g["num_classes"]))

    @classmethod
    def from_json(cls, text: str) -> "TrainedCombiner":
        return cls.from_dict(json.loads(text))
