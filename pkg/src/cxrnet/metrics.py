"""Thresholded binary-classification metrics: confusion counts, recall, precision,
F-beta, accuracy, and their CSV table shape.

Degenerate 0/0 ratios return 0 and set the row's `degenerate` flag rather than
raising; the decision rule at exactly the threshold is "predict positive".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Comparison-table column order (model name prepended by the compare command).
TABLE_COLUMNS = ("recall", "precision", "f05", "accuracy", "param_count", "train_seconds")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricRow:
    recall: float
    precision: float
    f_beta: float
    accuracy: float
    beta: float = 0.5
    threshold: float = 0.5
    degenerate: bool = False


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Tally TP/TN/FP/FN with the >= decision rule (positive = disease)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores have shape {scores.shape} but labels {labels.shape}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def recall(c: ConfusionCounts) -> float:
    """Fraction of diseased samples flagged; 0 when there are no positives."""
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def precision(c: ConfusionCounts) -> float:
    """Fraction of flagged samples actually diseased; 0 when nothing was flagged."""
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def f_beta(precision_: float, recall_: float, beta: float) -> float:
    """(1+beta^2) P R / (beta^2 P + R); 0 when the denominator vanishes."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    for name, v in (("precision", precision_), ("recall", recall_)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    denom = beta * beta * precision_ + recall_
    if denom == 0.0:
        return 0.0
    return (1.0 + beta * beta) * precision_ * recall_ / denom


def binary_accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("cannot compute accuracy of an empty evaluation")
    return (c.tp + c.tn) / c.total


def compute_metrics(scores, labels, threshold: float = 0.5, beta: float = 0.5) -> MetricRow:
    """One evaluation pass folded into a table row; flags degenerate 0/0 ratios."""
    c = confusion(scores, labels, threshold)
    r, p = recall(c), precision(c)
    degenerate = (c.tp + c.fn == 0) or (c.tp + c.fp == 0)
    return MetricRow(recall=r, precision=p, f_beta=f_beta(p, r, beta),
                     accuracy=binary_accuracy(c), beta=beta, threshold=threshold,
                     degenerate=degenerate)
