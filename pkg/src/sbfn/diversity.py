"""Epsilon-relaxed winner-takes-all update weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class DiversityConfig:
    epsilon: float = 0.0
    tie_break: str = "lowest_index"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.tie_break != "lowest_index":
            raise ConfigurationError(f"unsupported tie_break {self.tie_break!r}")


def _as_config(config) -> DiversityConfig:
    return config if isinstance(config, DiversityConfig) else DiversityConfig(float(config))


def wta_weights(losses, config) -> np.ndarray:
    """Weight ``1 - eps`` on the lowest-loss predictor, ``eps / (M - 1)`` elsewhere.

    Ties go to the lowest index. ``config`` may be a bare epsilon.
    """
    cfg = _as_config(config)
    losses = np.asarray(losses, dtype=float)
    if losses.ndim != 1 or losses.size == 0:
        raise ConfigurationError("losses must be a nonempty vector")
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NumericError(f"non-finite loss for predictor {bad[0]}", index=int(bad[0]))
    M = losses.size
    if M == 1:
        return np.ones(1)
    delta = np.full(M, cfg.epsilon / (M - 1))
    delta[int(np.argmin(losses))] = 1.0 - cfg.epsilon
    return delta


def wta_weight_matrix(losses, config) -> np.ndarray:
    """Row-wise :func:`wta_weights` for a ``b x M`` loss matrix."""
    cfg = _as_config(config)
    losses = np.asarray(losses, dtype=float)
    if not np.all(np.isfinite(losses)):
        j = int(np.argwhere(~np.isfinite(losses))[0, 1])
        raise NumericError(f"non-finite loss for predictor {j}", index=j)
    b, M = losses.shape
    if M == 1:
        return np.ones((b, 1))
    delta = np.full((b, M), cfg.epsilon / (M - 1))
    delta[np.arange(b), np.argmin(losses, axis=1)] = 1.0 - cfg.epsilon
    return delta
