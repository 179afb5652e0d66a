"""Hard-count evaluation metrics and ROC analysis.

Predictions binarize strictly above the threshold, so a pixel at exactly
0.5 maps to 0. Metrics derive from global confusion counts; whenever a
denominator degenerates the metric reports 0 and is listed under the
``undefined`` key so reports stay machine-readable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ConfusionCounts", "binarize", "confusion", "compute_metrics",
           "tversky_from_counts", "dice_from_counts", "roc_curve", "roc_auc"]

METRIC_NAMES = ("precision", "recall", "accuracy", "dice", "jaccard", "f1")


@dataclass
class ConfusionCounts:
    tp: float = 0.0
    fp: float = 0.0
    fn: float = 0.0
    tn: float = 0.0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> float:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def binarize(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strictly-above-threshold binarization."""
    return (np.asarray(pred) > threshold).astype(np.float64)


def confusion(target: np.ndarray, pred: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    t = np.asarray(target).astype(bool)
    p = np.asarray(pred) > threshold
    if t.shape != p.shape:
        raise ValueError(f"target {t.shape} and prediction {p.shape} shapes differ")
    return ConfusionCounts(
        tp=float(np.count_nonzero(t & p)),
        fp=float(np.count_nonzero(~t & p)),
        fn=float(np.count_nonzero(t & ~p)),
        tn=float(np.count_nonzero(~t & ~p)),
    )


def _safe_div(num: float, den: float, undefined: list, name: str) -> float:
    if den == 0.0:
        undefined.append(name)
        return 0.0
    return num / den


def compute_metrics(counts: ConfusionCounts) -> dict:
    """Six derived metrics plus the list of degenerate (division-by-zero) ones."""
    undefined: list = []
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    precision = _safe_div(tp, tp + fp, undefined, "precision")
    recall = _safe_div(tp, tp + fn, undefined, "recall")
    accuracy = _safe_div(tp + tn, counts.total, undefined, "accuracy")
    dice = _safe_div(2.0 * tp, 2.0 * tp + fp + fn, undefined, "dice")
    jaccard = _safe_div(tp, tp + fp + fn, undefined, "jaccard")
    f1 = _safe_div(2.0 * precision * recall, precision + recall, undefined, "f1")
    return {"precision": precision, "recall": recall, "accuracy": accuracy,
            "dice": dice, "jaccard": jaccard, "f1": f1, "undefined": undefined}


def tversky_from_counts(counts: ConfusionCounts, alpha: float = 0.3,
                        beta: float = 0.7) -> float:
    """Tversky index from hard counts; empty-vs-empty masks score 1."""
    den = counts.tp + alpha * counts.fp + beta * counts.fn
    if den == 0.0:
        return 1.0
    return counts.tp / den


def dice_from_counts(counts: ConfusionCounts) -> float:
    den = 2.0 * counts.tp + counts.fp + counts.fn
    if den == 0.0:
        return 1.0
    return 2.0 * counts.tp / den


def roc_curve(scores, labels):
    """ROC polyline and AUC.

    AUC is the rank statistic: the fraction of positive-negative pairs
    ordered correctly, ties counting one half. The polyline sweeps the
    distinct score thresholds from high to low, starting at (0, 0).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    npos = int(np.count_nonzero(y))
    nneg = y.size - npos
    if npos == 0 or nneg == 0:
        raise ValueError("roc needs at least one positive and one negative label")

    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average ranks over tie groups (1-based)
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    auc = (ranks[y].sum() - npos * (npos + 1) / 2.0) / (npos * nneg)

    desc = np.argsort(-s, kind="mergesort")
    ys = y[desc]
    ss = s[desc]
    cut = np.nonzero(np.diff(ss))[0]  # last index of each distinct score
    idx = np.concatenate([cut, [s.size - 1]])
    cum_tp = np.cumsum(ys)[idx]
    cum_fp = np.cumsum(~ys)[idx]
    fpr = np.concatenate([[0.0], cum_fp / nneg])
    tpr = np.concatenate([[0.0], cum_tp / npos])
    return fpr, tpr, float(auc)


def roc_auc(scores, labels) -> float:
    return roc_curve(scores, labels)[2]
