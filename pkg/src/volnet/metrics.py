"""Binary classification metrics: confusion counts, ACC/SEN/SPE, and AUC.

AUC is the trapezoidal area under the ROC curve built from every distinct
score threshold, which equals the rank statistic
P(score_pos > score_neg) + 0.5 * P(tie).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class ConfusionCounts(NamedTuple):
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _check_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be "
                         f"equal-length vectors")
    if scores.size and not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold: float) -> ConfusionCounts:
    """Tally TP/TN/FP/FN with score >= threshold predicted positive."""
    scores, labels = _check_scores(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def acc_sen_spe(c: ConfusionCounts):
    """(accuracy, sensitivity, specificity); an undefined ratio (zero
    denominator) is reported as None, never silently as 0."""
    acc = (c.tp + c.tn) / c.total if c.total > 0 else None
    sen = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else None
    spe = c.tn / (c.tn + c.fp) if (c.tn + c.fp) > 0 else None
    return acc, sen, spe


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) pairs swept over all distinct thresholds, from (0,0) to (1,1)."""
    scores, labels = _check_scores(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tps = np.cumsum(sorted_labels == 1)
    fps = np.cumsum(sorted_labels == 0)
    # keep only the last index of each tied-score run
    distinct = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    tpr = np.concatenate(([0.0], tps[distinct] / n_pos))
    fpr = np.concatenate(([0.0], fps[distinct] / n_neg))
    return fpr, tpr


def auc(scores, labels) -> float:
    """Trapezoidal area under the exact-threshold ROC curve."""
    fpr, tpr = roc_points(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def auc_pair_oracle(scores, labels) -> float:
    """Rank-statistic AUC by enumerating all (positive, negative) pairs."""
    scores, labels = _check_scores(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("needs at least one positive and one negative label")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)
