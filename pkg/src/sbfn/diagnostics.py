"""Ensemble diagnostics: ambiguity decomposition, vote disagreement, C-bound, summaries."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError

Z90 = 1.6448536269514722
Z95 = 1.959963984540054


@dataclass
class DecompositionReport:
    avg_member_error: float
    ambiguity: float
    ensemble_error: float

    def to_dict(self):
        return asdict(self)


@dataclass
class DisagreementReport:
    gibbs_risk: float
    expected_disagreement: float
    majority_vote_error: float
    joint_error: float
    c_bound: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def squared_loss_decomposition(member_predictions, targets) -> DecompositionReport:
    """Split the members' mean squared error around the per-row mean centroid.

    ``ensemble_error = avg_member_error - ambiguity`` holds exactly.
    """
    Z = np.atleast_2d(np.asarray(member_predictions, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1, 1)
    centroid = Z.mean(axis=1, keepdims=True)
    return DecompositionReport(
        avg_member_error=float(np.mean((Z - y) ** 2)),
        ambiguity=float(np.mean((Z - centroid) ** 2)),
        ensemble_error=float(np.mean((centroid - y) ** 2)),
    )


def gibbs_risk(member_labels, targets) -> float:
    L = np.atleast_2d(np.asarray(member_labels))
    y = np.asarray(targets).reshape(-1, 1)
    return float(np.mean(L != y))


def expected_disagreement(member_labels) -> float:
    """Mean over rows and ordered member pairs ``j != l`` of ``[label_j != label_l]``."""
    L = np.atleast_2d(np.asarray(member_labels))
    M = L.shape[1]
    if M < 2:
        raise ConfigurationError("expected disagreement needs at least two members")
    # agreeing ordered pairs per row = sum_c n_c (n_c - 1)
    agree = np.zeros(len(L))
    for c in np.unique(L):
        n_c = (L == c).sum(axis=1)
        agree += n_c * (n_c - 1)
    return float(np.mean(1.0 - agree / (M * (M - 1))))


def joint_error(member_labels, targets) -> float:
    """Probability that two independently drawn members (with replacement) both err."""
    L = np.atleast_2d(np.asarray(member_labels))
    w = np.mean(L != np.asarray(targets).reshape(-1, 1), axis=1)
    return float(np.mean(w * w))


def majority_vote(member_labels, num_classes: Optional[int] = None) -> np.ndarray:
    """Plurality label per row; ties go to the lowest class index."""
    L = np.atleast_2d(np.asarray(member_labels, dtype=int))
    C = int(L.max()) + 1 if num_classes is None else num_classes
    counts = np.zeros((len(L), C), dtype=int)
    for j in range(L.shape[1]):
        counts[np.arange(len(L)), L[:, j]] += 1
    return np.argmax(counts, axis=1)


def majority_vote_error(member_labels, targets, num_classes: Optional[int] = None) -> float:
    y = np.asarray(targets, dtype=int)
    C = num_classes
    if C is None:
        C = int(max(np.max(member_labels), np.max(y))) + 1
    return float(np.mean(majority_vote(member_labels, C) != y))


def c_bound(gibbs: float, disagreement: float) -> Optional[float]:
    """``1 - (1 - 2 R)^2 / (1 - 2 d)`` when both terms are below 1/2, else None.

    Second-order majority-vote bound from the PAC-Bayes literature. Valid
    for two-class votes; see :func:`c_bound_joint` for more classes.
    """
    if gibbs < 0.5 and disagreement < 0.5:
        return 1.0 - (1.0 - 2.0 * gibbs) ** 2 / (1.0 - 2.0 * disagreement)
    return None


def c_bound_joint(gibbs: float, joint: float) -> Optional[float]:
    """C-bound written with the joint error: ``1 - (1 - 2R)^2 / (1 - 4R + 4e)``.

    The denominator is the second moment of the vote margin, so this form
    bounds the plurality-vote error for any number of classes. With two
    classes it equals :func:`c_bound` because ``d = 2 (R - e)``.
    """
    if gibbs >= 0.5:
        return None
    second = 1.0 - 4.0 * gibbs + 4.0 * joint
    if second <= 0:
        return None
    return 1.0 - (1.0 - 2.0 * gibbs) ** 2 / second


def disagreement_report(member_labels, targets, num_classes: Optional[int] = None) -> DisagreementReport:
    """All vote diagnostics for one ensemble.

    The reported bound uses the joint-error form, which stays valid beyond
    two classes; it is attached only under the usual applicability rule
    (Gibbs risk and disagreement both below 1/2).
    """
    L = np.atleast_2d(np.asarray(member_labels, dtype=int))
    rg = gibbs_risk(L, targets)
    d = expected_disagreement(L) if L.shape[1] >= 2 else 0.0
    e = joint_error(L, targets)
    mv = majority_vote_error(L, targets, num_classes)
    bound = c_bound_joint(rg, e) if (rg < 0.5 and d < 0.5) else None
    return DisagreementReport(rg, d, mv, e, bound)


def base_average_accuracy(member_labels, targets) -> float:
    """Mean of the individual members' accuracies."""
    return 1.0 - gibbs_risk(member_labels, targets)


@dataclass
class Summary:
    mean: float
    std: float
    half_width_90: float
    half_width_95: float
    n: int

    def to_dict(self):
        return asdict(self)


def summarize(values: Sequence[float]) -> Summary:
    """Mean, sample std and normal-approximation interval half-widths."""
    v = np.asarray(values, dtype=float)
    n = v.size
    if n < 2:
        raise ConfigurationError("summarize needs at least two runs")
    mean = float(v.mean())
    std = float(np.sqrt(np.sum((v - mean) ** 2) / (n - 1)))
    se = std / math.sqrt(n)
    return Summary(mean, std, Z90 * se, Z95 * se, n)
