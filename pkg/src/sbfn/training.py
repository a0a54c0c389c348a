"""End-to-end ensemble training: diversity-weighted bases plus a radial combiner.

Regression follows the per-sample loop (bases, running moments and the
combiner updated together) or trains the bases the same way and then fits
the combiner in closed form on the plug-in structured matrix.
Classification follows the mini-batch loop with per-sample diversity
weights, probability blocks, row-normalised radial features and a
temperature-scaled softmax head.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import base_learners as bl
from . import combiner as cb
from .baselines import MoeGate, logit_average, moe_combine_rows, train_moe_gate
from .datasets import Dataset
from .diagnostics import disagreement_report, squared_loss_decomposition
from .diversity import DiversityConfig, wta_weight_matrix, wta_weights
from .errors import ConfigurationError
from .structured import EUCLIDEAN, StructuredMatrix, simplex, softmax

log = logging.getLogger(__name__)


def derive_seed(master: int, *keys) -> int:
    """Deterministic child seed for a (master, key path) pair."""
    ints = [k if isinstance(k, int) else int.from_bytes(str(k).encode()[:8].ljust(8, b"\0"), "little")
            for k in keys]
    return int(np.random.SeedSequence(entropy=int(master), spawn_key=ints).generate_state(1)[0])


# -- regression -------------------------------------------------------------------------

@dataclass
class RegressionConfig:
    num_models: int = 5
    epsilon: float = 0.0
    hidden_sizes: tuple = (20, 20)
    lr_theta: float = 0.03
    lr_alpha: float = 0.03
    init_scale: float = 0.1
    l1: float = 0.0
    lambda2: float = 3.0
    epochs: int = 20
    mode: str = "closed-form"
    variant: str = "kmeans"
    num_units: Optional[int] = None
    window: int = 20
    normalize_rows: bool = True
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_sizes = tuple(self.hidden_sizes)
        if self.num_models < 1:
            raise ConfigurationError("num_models must be >= 1")
        DiversityConfig(self.epsilon)
        if self.mode not in ("closed-form", "iterative"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        self.variant = _canon_variant(self.variant)
        if self.mode == "iterative" and self.variant not in cb.UNIVARIATE_VARIANTS:
            raise ConfigurationError("iterative regression uses a G1/G2/G3 variant")
        if self.mode == "closed-form" and self.variant not in ("kmeans", "G1"):
            raise ConfigurationError("closed-form regression uses the kmeans or G1 variant")
        if self.lambda2 < 0 or self.epochs < 1 or self.window < 1:
            raise ConfigurationError("lambda2 >= 0, epochs >= 1 and window >= 1 required")
        if self.lr_alpha <= 0:
            raise ConfigurationError("lr_alpha must be > 0")
        bl.PredictorConfig(self.hidden_sizes, self.init_scale, self.l1, self.lr_theta, 0, self.activation)

    @property
    def units(self) -> int:
        return self.num_units or self.num_models


def _canon_variant(v: str) -> str:
    v = str(v)
    return v.upper() if v.lower() in ("g1", "g2", "g3") else v.lower()


@dataclass
class RegressionEnsemble:
    bases: list
    combiner: Optional[cb.TrainedCombiner] = None

    def member_predictions(self, X) -> np.ndarray:
        return np.column_stack([bl.forward(p, X)[:, 0] for p in self.bases])

    def structured(self, X) -> StructuredMatrix:
        return StructuredMatrix(self.member_predictions(X), EUCLIDEAN)

    def predict(self, X) -> np.ndarray:
        D = self.structured(X)
        return cb.predict_regression_batch(D.values, self.combiner.layer, self.combiner.weights)

    def predict_arithmetic(self, X) -> np.ndarray:
        return self.member_predictions(X).mean(axis=1)


def _predictor_configs(cfg: RegressionConfig, seed: int):
    return [bl.PredictorConfig(cfg.hidden_sizes, cfg.init_scale, cfg.l1, cfg.lr_theta,
                               derive_seed(seed, "model", j), cfg.activation)
            for j in range(cfg.num_models)]


def train_regression(X, y, cfg: RegressionConfig, seed: int = 0) -> RegressionEnsemble:
    """Per-sample diversity-weighted training of the bases.

    In iterative mode the running-moment layer and ``alpha`` are trained in
    the same loop; in closed-form mode the combiner is fitted afterwards by
    :func:`fit_closed_form`.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    N = len(X)
    M = cfg.num_models
    pcfgs = _predictor_configs(cfg, seed)
    bases = [bl.init_mlp(p, X.shape[1], 1) for p in pcfgs]
    eps = cfg.epsilon
    weigh = lambda losses: wta_weights(losses, eps)
    lrs = np.full(M, cfg.lr_theta)
    # the per-sample L1 term is spread over the N samples of an epoch
    l1s = np.full(M, cfg.l1 / N)
    iterative = cfg.mode == "iterative"
    if iterative:
        layer = cb.RbfLayer.running(cfg.variant, M, cfg.window)
        alpha = np.zeros(M)
        norm = "sum" if cfg.normalize_rows else None
        # ridge coefficient per sample so the fixed point matches the closed form
        lam = cfg.lambda2 / N
    rng = np.random.default_rng(derive_seed(seed, "order"))
    stack = bl.MlpStack.from_params(bases)
    for _ in range(cfg.epochs):
        for i in rng.permutation(N):
            z, _ = stack.squared_step(X[i], y[i], weigh, lrs, l1s)
            if iterative:
                cb.update_moments(layer, z)
                phi = cb.feature_matrix(z[None, :], layer, norm)
                alpha = cb.sgd_step_regression(alpha, phi, [y[i]], cfg.lr_alpha, lam)
    ens = RegressionEnsemble(stack.to_params())
    if iterative:
        ens.combiner = cb.TrainedCombiner(layer, cb.CombinerWeights(alpha, 1.0, cfg.normalize_rows))
    return ens


def closed_form_layer(D: StructuredMatrix, variant: str, K: int, seed: int) -> cb.RbfLayer:
    """Centres for the plug-in structured matrix."""
    if variant == "kmeans":
        C, s = cb.kmeans_centers(D, K, seed=seed)
        return cb.RbfLayer(C, s, "kmeans")
    if variant == "G1":
        layer = cb.RbfLayer.running("G1", D.values.shape[1])
        for row in D.values:
            cb.update_moments(layer, row)
        return layer
    raise ConfigurationError(f"closed-form fit does not support variant {variant!r}")


def fit_closed_form(D: StructuredMatrix, y, lambda2: float, variant: str = "kmeans",
                    K: Optional[int] = None, seed: int = 0, normalize_rows: bool = True,
                    layer: Optional[cb.RbfLayer] = None) -> cb.TrainedCombiner:
    layer = layer or closed_form_layer(D, variant, K or D.num_models, seed)
    weights = cb.CombinerWeights(np.zeros(layer.num_units), 1.0, normalize_rows)
    Phi = cb.feature_matrix(D, layer, weights.norm)
    weights.alpha = cb.ridge_solve(Phi, y, lambda2)
    return cb.TrainedCombiner(layer, weights, EUCLIDEAN)


def fit_alpha_iterative(features, y, lambda2: float, eta: Optional[float] = None,
                        max_steps: int = 200000, tol: float = 1e-12,
                        alpha0: Optional[np.ndarray] = None) -> np.ndarray:
    """Full-batch gradient steps on frozen features.

    The ridge coefficient is divided by N so the fixed point is the
    closed-form solution with the same ``lambda2``. The default step is
    ``1 / L`` for the objective's Lipschitz constant.
    """
    F = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float)
    N = len(F)
    lam = lambda2 / N
    if eta is None:
        L = np.linalg.eigvalsh(F.T @ F / N).max() + lam
        eta = 1.0 / L
    alpha = np.zeros(F.shape[1]) if alpha0 is None else np.array(alpha0, dtype=float)
    for _ in range(max_steps):
        new = cb.sgd_step_regression(alpha, F, y, eta, lam)
        if np.linalg.norm(new - alpha) <= tol * max(np.linalg.norm(new), 1e-300):
            return new
        alpha = new
    return alpha


def rmse(pred, y) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(y)) ** 2)))


# -- classification -----------------------------------------------------------------------

HETEROGENEOUS = ((16,), (32, 32), (64, 64))


@dataclass
class ClassificationConfig:
    num_models: int = 5
    epsilon: float = 0.5
    architectures: tuple = HETEROGENEOUS   # cycled across models
    lr_theta: float = 0.1
    lr_alpha: float = 0.1
    temperature: float = 3.0
    init_scale: float = 1.0
    l1: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    num_units: Optional[int] = None        # default M * C
    norm_kind: str = "sum"
    update_centers: bool = True
    moe_epochs: int = 20
    moe_lr: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        self.architectures = tuple(tuple(int(h) for h in a) for a in self.architectures)
        if self.num_models < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("num_models, batch_size and epochs must be >= 1")
        if not self.architectures:
            raise ConfigurationError("need at least one architecture")
        DiversityConfig(self.epsilon)
        if self.temperature <= 0 or self.lr_alpha <= 0:
            raise ConfigurationError("temperature and lr_alpha must be > 0")
        if self.norm_kind not in ("sum", "layernorm", "none"):
            raise ConfigurationError(f"unknown norm_kind {self.norm_kind!r}")
        for a in self.architectures:
            bl.PredictorConfig(a, self.init_scale, self.l1, self.lr_theta, 0, self.activation)

    def predictor_configs(self, seed: int):
        return [bl.PredictorConfig(self.architectures[j % len(self.architectures)], self.init_scale,
                                   self.l1, self.lr_theta, derive_seed(seed, "model", j), self.activation)
                for j in range(self.num_models)]


@dataclass
class ClassificationEnsemble:
    bases: list
    combiner: cb.TrainedCombiner
    num_classes: int
    gate: Optional[MoeGate] = None

    def member_logits(self, X) -> np.ndarray:
        return np.stack([bl.forward(p, X) for p in self.bases], axis=1)   # N x M x C

    def structured(self, X) -> StructuredMatrix:
        L = self.member_logits(X)
        return StructuredMatrix(softmax(L).reshape(len(L), -1), simplex(self.num_classes))

    def predict_proba(self, X) -> np.ndarray:
        return cb.predict_classification_batch(self.structured(X).values, self.combiner.layer,
                                                self.combiner.weights)


def _onehot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def train_classification(X, y, num_classes: int, cfg: ClassificationConfig,
                         seed: int = 0) -> ClassificationEnsemble:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    N, C, M = len(X), num_classes, cfg.num_models
    pcfgs = cfg.predictor_configs(seed)
    bases = [bl.init_mlp(p, X.shape[1], C) for p in pcfgs]
    K = cfg.num_units or M * C
    norm = None if cfg.norm_kind == "none" else cfg.norm_kind

    def rows_of(Xb):
        L = np.stack([bl.forward(p, Xb) for p in bases], axis=1)
        return softmax(L).reshape(len(Xb), -1), L

    D0, _ = rows_of(X)
    centers, scales = cb.kmeans_centers(D0, min(K, N), seed=derive_seed(seed, "kmeans"))
    layer = cb.RbfLayer(centers, scales, "kmeans")
    weights = cb.CombinerWeights(np.zeros((layer.num_units, C)), cfg.temperature, norm is not None,
                                 norm or "sum")
    rng = np.random.default_rng(derive_seed(seed, "order"))
    for epoch in range(cfg.epochs):
        if epoch > 0:
            D, _ = rows_of(X)
            # warm-started Lloyd keeps unit order, so alpha rows stay attached to their centres
            layer.centers, layer.scales = cb.kmeans_refine(D, layer.centers, scale_floor=layer.scale_floor)
        order = rng.permutation(N)
        for s in range(0, N, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            Xb, yb = X[idx], y[idx]
            rows, logits = rows_of(Xb)
            losses = np.column_stack([bl.per_sample_loss(logits[:, j], yb, "cross_entropy")
                                      for j in range(M)])
            deltas = wta_weight_matrix(losses, cfg.epsilon)
            for j in range(M):
                bl.delta_weighted_batch_update(bases[j], Xb, yb, deltas[:, j], "cross_entropy",
                                               pcfgs[j], inplace=True)
            _, g_alpha, g_centers = cb.classification_loss_grads(rows, yb, layer, weights)
            weights.alpha = weights.alpha - cfg.lr_alpha * g_alpha
            if cfg.update_centers:
                layer = cb.gradient_step_centers(layer, g_centers, cfg.lr_alpha)
    return ClassificationEnsemble(bases, cb.TrainedCombiner(layer, weights, simplex(C)), C)


def evaluate_classification(ens: ClassificationEnsemble, train: Dataset, test: Dataset,
                            cfg: ClassificationConfig, seed: int = 0) -> dict:
    """Accuracies of every combiner plus vote diagnostics on ``test``."""
    C = ens.num_classes
    y = np.asarray(test.targets, dtype=int)
    L_test = ens.member_logits(test.features)
    D_test = softmax(L_test).reshape(len(y), -1)
    p_sbfn = cb.predict_classification_batch(D_test, ens.combiner.layer, ens.combiner.weights)
    p_mean = logit_average(L_test)
    gate = MoeGate.zeros(cfg.num_models, C, cfg.moe_lr)
    gate = train_moe_gate(gate, ens.structured(train.features).values, train.targets,
                          epochs=cfg.moe_epochs, seed=derive_seed(seed, "moe"))
    ens.gate = gate
    p_moe = moe_combine_rows(D_test, gate)
    member_labels = L_test.argmax(axis=2)
    p_arith = softmax(L_test).mean(axis=1)
    acc = lambda p: float(np.mean(p.argmax(axis=1) == y))
    report = disagreement_report(member_labels, y, C)
    return {
        "sbfn_acc": acc(p_sbfn),
        "logit_avg_acc": acc(p_mean),
        "moe_acc": acc(p_moe),
        "arith_prob_acc": acc(p_arith),
        "base_avg_acc": 1.0 - report.gibbs_risk,
        "gibbs_risk": report.gibbs_risk,
        "expected_disagreement": report.expected_disagreement,
        "majority_vote_error": report.majority_vote_error,
        "joint_error": report.joint_error,
        "c_bound": report.c_bound,
        "_member_labels": member_labels,
        "_targets": y,
    }
