"""Evaluation statistics: ROC/AUC, macro precision/recall/F1, DeLong's test, precision@K.

AUC is computed in its Mann-Whitney form (probability that a random positive
outranks a random negative, ties counted 1/2), which is exactly the trapezoidal
area under the empirical ROC curve.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSet:
    """Paired scores and binary labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise MetricError("scores and labels must be equal-length 1D arrays")
        if not np.isin(labels, (0, 1)).all():
            raise MetricError("labels must be 0/1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("both classes must be present")
    return scores, labels, pos, neg


def _midranks(x):
    """Midranks (1-based); tied values share the average of their rank range."""
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    n = len(x)
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and sorted_x[j] == sorted_x[i]:
            j += 1
        ranks[i:j] = (i + j + 1) / 2.0
        i = j
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks
    return out


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of (pos, neg) pairs with score_pos > score_neg, ties 1/2."""
    scores, labels, pos, neg = _split_classes(scores, labels)
    ranks = _midranks(scores)
    n_pos, n_neg = len(pos), len(neg)
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    """ROC points at every distinct score threshold (predict positive when score >= t).

    Starts at (0, 0) and ends at (1, 1); trapezoidal area equals `auc` exactly.
    """
    scores, labels, pos, neg = _split_classes(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    distinct = np.r_[np.diff(sorted_scores) != 0, True]
    tp = np.cumsum(sorted_labels == 1)[distinct]
    fp = np.cumsum(sorted_labels == 0)[distinct]
    tpr = np.r_[0.0, tp / len(pos)]
    fpr = np.r_[0.0, fp / len(neg)]
    thresholds = np.r_[np.inf, sorted_scores[distinct]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def trapezoid_area(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


def macro_prf(scores, labels, threshold) -> tuple[float, float, float]:
    """Macro-averaged precision/recall/F1 at a decision threshold (score >= t is positive).

    Per-class ratios with a zero denominator are set to 0 with a warning.
    """
    if not 0 <= threshold <= 1:
        raise MetricError("threshold must lie in [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) == 0:
        raise MetricError("empty scored set")
    preds = (scores >= threshold).astype(np.int64)

    def _ratio(num, den, name):
        if den == 0:
            warnings.warn(f"{name} undefined (zero denominator); reporting 0", stacklevel=3)
            return 0.0
        return num / den

    precisions, recalls, f1s = [], [], []
    for cls in (1, 0):
        tp = int(np.sum((preds == cls) & (labels == cls)))
        fp = int(np.sum((preds == cls) & (labels != cls)))
        fn = int(np.sum((preds != cls) & (labels == cls)))
        p = _ratio(tp, tp + fp, f"precision(class={cls})")
        r = _ratio(tp, tp + fn, f"recall(class={cls})")
        f = _ratio(2 * p * r, p + r, f"f1(class={cls})")
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    return (float(np.mean(precisions)), float(np.mean(recalls)), float(np.mean(f1s)))


def _placements(scores, labels):
    """DeLong structural components V10 (per positive) and V01 (per negative)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = len(pos), len(neg)
    all_ranks = _midranks(np.r_[pos, neg])
    pos_ranks = _midranks(pos)
    neg_ranks = _midranks(neg)
    v10 = (all_ranks[:m] - pos_ranks) / n
    v01 = 1.0 - (all_ranks[m:] - neg_ranks) / m
    theta = float(v10.mean())
    return v10, v01, theta


def delong_test(scores_a, scores_b, labels) -> tuple[float, float, float, float]:
    """Paired two-sided DeLong test for the difference of two correlated AUCs.

    Returns (auc_a, auc_b, z, p). Requires >= 2 cases per class so the
    placement covariances are defined.
    """
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if scores_a.shape != labels.shape or scores_b.shape != labels.shape:
        raise MetricError("scores_a, scores_b and labels must have equal length")
    _split_classes(scores_a, labels)
    m = int(np.sum(labels == 1))
    n = int(np.sum(labels == 0))
    if m < 2 or n < 2:
        raise MetricError("DeLong's test needs at least 2 cases per class")

    v10_a, v01_a, auc_a = _placements(scores_a, labels)
    v10_b, v01_b, auc_b = _placements(scores_b, labels)
    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1)
    var_diff = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m + (
        s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]
    ) / n
    if var_diff <= 0:
        if auc_a == auc_b:
            return auc_a, auc_b, 0.0, 1.0
        raise MetricError("zero variance of the AUC difference with unequal AUCs")
    z = (auc_a - auc_b) / np.sqrt(var_diff)
    p = float(2 * norm.sf(abs(z)))
    return float(auc_a), float(auc_b), float(z), p


def precision_at_k(relevance, k) -> float:
    """(# relevant among retrieved) / K."""
    if k <= 0:
        raise MetricError("K must be positive")
    flags = np.asarray(relevance)
    if len(flags) > k:
        raise MetricError("more relevance flags than K")
    return float(np.sum(flags != 0) / k)
