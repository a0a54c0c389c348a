"""Small feedforward base predictors trained with diversity-weighted SGD.

Hidden layers use ReLU (or tanh); the output layer is linear and returns a
scalar for regression or ``C`` logits for classification.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError

LOSS_KINDS = ("squared", "cross_entropy")
ACTIVATIONS = ("relu", "tanh")


@dataclass
class PredictorConfig:
    hidden_sizes: Sequence[int] = (20, 20)
    init_scale: float = 0.1
    l1_coeff: float = 0.0
    learning_rate: float = 0.03
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError(f"hidden_sizes must be nonempty positive ints, got {self.hidden_sizes}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.init_scale < 0 or self.l1_coeff < 0:
            raise ConfigurationError("init_scale and l1_coeff must be nonnegative")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


@dataclass
class MlpParams:
    layers: list  # [(W[out, in], b[out]), ...]
    activation: str = "relu"

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i][0].shape[1] != self.layers[i - 1][0].shape[0]:
                raise ShapeError(f"layer {i} expects {self.layers[i][0].shape[1]} inputs, "
                                 f"layer {i - 1} emits {self.layers[i - 1][0].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def to_dict(self) -> dict:
        return {"activation": self.activation,
                "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        layers = [(np.asarray(l["W"], dtype=float), np.asarray(l["b"], dtype=float)) for l in d["layers"]]
        return cls(layers, d.get("activation", "relu"))


def init_mlp(config: PredictorConfig, in_dim: int, out_dim: int) -> MlpParams:
    """Weights ~ N(0, (init_scale / sqrt(fan_in))^2), biases zero."""
    if in_dim < 1 or out_dim < 1:
        raise ConfigurationError("in_dim and out_dim must be >= 1")
    rng = np.random.default_rng(config.seed)
    sizes = [in_dim, *config.hidden_sizes, out_dim]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.standard_normal((fan_out, fan_in)) * (config.init_scale / np.sqrt(fan_in))
        layers.append((W, np.zeros(fan_out)))
    return MlpParams(layers, config.activation)


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(float) if kind == "relu" else 1.0 - a * a


def _forward_cache(params: MlpParams, X: np.ndarray):
    if X.shape[-1] != params.in_dim:
        raise ShapeError(f"input has {X.shape[-1]} features, network expects {params.in_dim}")
    acts, pres = [X], []
    a = X
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        z = a @ W.T + b
        pres.append(z)
        a = z if i == last else _act(z, params.activation)
        acts.append(a)
    return acts, pres


def forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    return _forward_cache(params, x)[0][-1]


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def per_sample_loss(out: np.ndarray, y, loss_kind: str) -> np.ndarray:
    """Squared error ``(z - y)^2`` or cross-entropy of softmax(logits)."""
    if loss_kind == "squared":
        return (out[:, 0] - np.asarray(y, dtype=float)) ** 2
    if loss_kind == "cross_entropy":
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(out)), np.asarray(y, dtype=int)]
    raise ConfigurationError(f"unknown loss kind {loss_kind!r}")


def _output_grad(out, y, loss_kind):
    if loss_kind == "squared":
        return 2.0 * (out - np.asarray(y, dtype=float).reshape(-1, 1))
    p = _softmax_rows(out)
    p[np.arange(len(out)), np.asarray(y, dtype=int)] -= 1.0
    return p


def _check_loss_kind(params, loss_kind):
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "squared" and params.output_dim != 1:
        raise ShapeError("squared loss requires output_dim == 1")
    if loss_kind == "cross_entropy" and params.output_dim < 2:
        raise ShapeError("cross_entropy requires output_dim >= 2")


def weighted_loss_and_grads(params: MlpParams, X, y, weights, loss_kind: str):
    """Return ``(1/b) sum_i w_i l_i`` and its gradient for every layer.

    ``X`` is ``b x d``; ``weights`` has length ``b``.
    """
    _check_loss_kind(params, loss_kind)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(y)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (len(X),))
    b = len(X)
    acts, pres = _forward_cache(params, X)
    out = acts[-1]
    loss = float(np.dot(w, per_sample_loss(out, y, loss_kind)) / b)
    g = _output_grad(out, y, loss_kind) * (w / b)[:, None]
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        W = params.layers[i][0]
        with np.errstate(over="ignore", invalid="ignore"):
            gW = g.T @ acts[i]
            gb = g.sum(axis=0)
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {i}", index=i)
        grads[i] = (gW, gb)
        if i > 0:
            g = (g @ W) * _act_grad(pres[i - 1], acts[i], params.activation)
    return loss, grads


def _apply(params: MlpParams, grads, lr: float, l1: float) -> None:
    for (W, b), (gW, gb) in zip(params.layers, grads):
        W -= lr * (gW + l1 * np.sign(W))
        b -= lr * (gb + l1 * np.sign(b))


def delta_weighted_batch_update(params: MlpParams, X, y, deltas, loss_kind: str,
                                config: PredictorConfig, l1_coeff: float | None = None,
                                inplace: bool = False) -> MlpParams:
    """theta <- theta - lr * (grad[(1/b) sum_i delta_i l_i] + l1 * sign(theta)).

    ``l1_coeff`` overrides ``config.l1_coeff`` (the regression loop rescales it).
    """
    l1 = config.l1_coeff if l1_coeff is None else l1_coeff
    _, grads = weighted_loss_and_grads(params, X, y, deltas, loss_kind)
    out = params if inplace else params.copy()
    _apply(out, grads, config.learning_rate, l1)
    return out


def delta_weighted_update(params: MlpParams, x, y, delta: float, loss_kind: str,
                          config: PredictorConfig, l1_coeff: float | None = None,
                          inplace: bool = False) -> MlpParams:
    """Single-sample diversity-weighted step."""
    if not np.isfinite(delta):
        raise NumericError("delta must be finite")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return delta_weighted_batch_update(params, x, [y], [delta], loss_kind, config,
                                       l1_coeff=l1_coeff, inplace=inplace)


# -- stacked fast path --------------------------------------------------------
# Per-sample training of M same-shaped regressors is dominated by Python call
# overhead; stacking the parameters lets one step update every model at once.

@dataclass
class MlpStack:
    Ws: list  # each (M, out, in)
    bs: list  # each (M, out)
    activation: str = "relu"

    @classmethod
    def from_params(cls, params: Sequence[MlpParams]) -> "MlpStack":
        shapes = {tuple(W.shape for W, _ in p.layers) for p in params}
        if len(shapes) != 1 or len({p.activation for p in params}) != 1:
            raise ShapeError("stacking requires identical architectures")
        n = len(params[0].layers)
        return cls([np.stack([p.layers[i][0] for p in params]) for i in range(n)],
                   [np.stack([p.layers[i][1] for p in params]) for i in range(n)],
                   params[0].activation)

    def to_params(self) -> list:
        M = self.Ws[0].shape[0]
        return [MlpParams([(W[j].copy(), b[j].copy()) for W, b in zip(self.Ws, self.bs)], self.activation)
                for j in range(M)]

    def forward_one(self, x: np.ndarray) -> np.ndarray:
        """Outputs of all M models on a single input, shape ``(M, out)``."""
        a = np.broadcast_to(x, (self.Ws[0].shape[0], x.shape[0]))
        last = len(self.Ws) - 1
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            z = np.einsum("moi,mi->mo", W, a) + b
            a = z if i == last else _act(z, self.activation)
        return a

    def squared_step(self, x: np.ndarray, y: float, weigh, lrs: np.ndarray,
                     l1s: np.ndarray):
        """One per-sample squared-loss step for every model.

        ``weigh`` maps the ``M`` instantaneous losses to update weights.
        Returns the pre-step outputs and the weights used.
        """
        M = self.Ws[0].shape[0]
        acts = [np.broadcast_to(x, (M, x.shape[0]))]
        pres = []
        last = len(self.Ws) - 1
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            z = np.einsum("moi,mi->mo", W, acts[-1]) + b
            pres.append(z)
            acts.append(z if i == last else _act(z, self.activation))
        out = acts[-1][:, 0].copy()
        with np.errstate(over="ignore"):
            deltas = weigh((out - y) ** 2)
        g = (2.0 * (out - y) * deltas)[:, None]
        for i in range(last, -1, -1):
            W, b = self.Ws[i], self.bs[i]
            gW = g[:, :, None] * acts[i][:, None, :]
            if not np.all(np.isfinite(gW)):
                raise NumericError(f"non-finite gradient in layer {i}", index=i)
            g_next = np.einsum("mo,moi->mi", g, W) if i > 0 else None
            W -= lrs[:, None, None] * (gW + l1s[:, None, None] * np.sign(W))
            b -= lrs[:, None] * (g + l1s[:, None] * np.sign(b))
            if i > 0:
                g = g_next * _act_grad(pres[i - 1], acts[i], self.activation)
        return out, deltas
