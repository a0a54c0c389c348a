"""Reference combiners: arithmetic mean, logit averaging and a gated mixture."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError
from .structured import softmax


def arithmetic_combine(predictions) -> float:
    p = np.asarray(predictions, dtype=float)
    if p.size == 0:
        raise ShapeError("need at least one prediction")
    return float(p.mean())


def logit_average(logits_per_model, temperature: float = 1.0) -> np.ndarray:
    """Average the models' logits, then apply one softmax.

    Accepts ``M x C`` for one instance or ``N x M x C`` for a batch.
    """
    L = np.asarray(logits_per_model, dtype=float)
    if L.ndim < 2 or L.shape[-1] == 0:
        raise ShapeError("expected (M, C) or (N, M, C) logits")
    if temperature <= 0:
        raise ConfigurationError("temperature must be > 0")
    return softmax(L.mean(axis=-2) / temperature)


@dataclass
class MoeGate:
    """Linear gate ``M x (M*C)`` on the concatenated probability blocks."""

    weights: np.ndarray
    learning_rate: float = 0.1

    @classmethod
    def zeros(cls, num_models: int, num_classes: int, learning_rate: float = 0.1) -> "MoeGate":
        return cls(np.zeros((num_models, num_models * num_classes)), learning_rate)

    @property
    def num_models(self) -> int:
        return self.weights.shape[0]

    def gate(self, rows: np.ndarray) -> np.ndarray:
        return softmax(np.atleast_2d(rows) @ self.weights.T)


def _row_blocks(rows, M) -> np.ndarray:
    """``N x (M*C)`` structured rows (or ``N x M x C``) as ``N x M x C``."""
    P = np.asarray(rows, dtype=float)
    if P.ndim == 2:
        if P.shape[1] % M:
            raise ShapeError(f"row width {P.shape[1]} not divisible by M={M}")
        P = P.reshape(P.shape[0], M, -1)
    if P.ndim != 3 or P.shape[1] != M:
        raise ShapeError(f"expected {M} probability blocks per row")
    return P


def moe_combine_rows(rows, gate: MoeGate) -> np.ndarray:
    """Batch mixture over structured rows; returns ``N x C``."""
    P = _row_blocks(rows, gate.num_models)
    if P.shape[1] * P.shape[2] != gate.weights.shape[1]:
        raise ShapeError("gate width does not match M*C")
    g = gate.gate(P.reshape(len(P), -1))
    return np.einsum("nm,nmc->nc", g, P)


def moe_combine(probs_per_model, gate: MoeGate) -> np.ndarray:
    """``sum_j g_j p_j`` with ``g = softmax(W [p_1; ...; p_M])`` for one instance."""
    P = np.asarray(probs_per_model, dtype=float)
    if P.ndim != 2 or P.shape[0] != gate.num_models:
        raise ShapeError(f"expected {gate.num_models} probability vectors of equal length")
    return moe_combine_rows(P[None], gate)[0]


def moe_loss_and_grad(gate: MoeGate, rows, labels):
    """Mean negative log-likelihood of the mixture and its gradient w.r.t. the gate."""
    M = gate.num_models
    P = _row_blocks(rows, M)
    X = P.reshape(len(P), -1)
    labels = np.asarray(labels, dtype=int)
    n = len(X)
    g = gate.gate(X)
    py_j = P[np.arange(n), :, labels]            # n x M, each model's prob of the true class
    py = np.maximum((g * py_j).sum(axis=1), 1e-300)
    loss = float(-np.mean(np.log(py)))
    dg = -py_j / py[:, None]                      # dL_i / dg_ij
    dz = g * (dg - (g * dg).sum(axis=1, keepdims=True))
    grad = dz.T @ X / n
    return loss, grad


def train_moe_gate(gate: MoeGate, rows, labels, epochs: int = 20, lr: float | None = None,
                   batch_size: int = 32, seed: int = 0) -> MoeGate:
    """Mini-batch SGD on the gate's cross-entropy; returns a new gate."""
    lr = gate.learning_rate if lr is None else lr
    P = _row_blocks(rows, gate.num_models)
    labels = np.asarray(labels, dtype=int)
    W = gate.weights.copy()
    rng = np.random.default_rng(seed)
    n = len(P)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            _, grad = moe_loss_and_grad(MoeGate(W, lr), P[idx], labels[idx])
            W = W - lr * grad
            if not np.all(np.isfinite(W)):
                raise NumericError("non-finite gate weights")
    return MoeGate(W, gate.learning_rate)
