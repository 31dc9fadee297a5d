"""metrics.py :: Classification metrics: accuracy, binary F1 and mAP."""

from __future__ import annotations

import typing as t

import numpy as np

from lipfast.errors import DimensionError, UsageError


def _labels(values: t.Any, name: str) -> np.ndarray:
    array = np.asarray(values)
    if array.size == 0:
        raise UsageError(f"{name} is empty")
    return array


def accuracy(preds: t.Any, labels: t.Any) -> float:
    """Return the fraction of predictions equal to their label."""
    preds, labels = _labels(preds, "preds"), _labels(labels, "labels")
    if preds.shape != labels.shape:
        raise DimensionError(f"preds {preds.shape} vs labels {labels.shape}")
    return float(np.mean(preds == labels))


def f1_binary(preds: t.Any, labels: t.Any) -> float:
    """Harmonic mean of precision and recall for the positive class `1`.

    Returns 0 when precision and recall are both 0 (or undefined).
    """
    preds, labels = _labels(preds, "preds"), _labels(labels, "labels")
    if preds.shape != labels.shape:
        raise DimensionError(f"preds {preds.shape} vs labels {labels.shape}")
    predicted, actual = preds == 1, labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def average_precision(scores: t.Any, targets: t.Any) -> float:
    """Mean of the precision at the rank of every positive.

    Samples are ranked by descending score; equal scores keep their input
    order. Returns NaN when there is no positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    order = np.argsort(-scores, kind="stable")
    hits = targets[order] == 1
    positives = int(hits.sum())
    if positives == 0:
        return float("nan")
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / positives)


def mean_average_precision(scores: t.Any, targets: t.Any) -> float:
    """Average `average_precision` over the classes that have a positive.

    Args:
        scores: `(B, C)` class scores
        targets: `(B, C)` binary relevance, or `(B,)` integer labels

    """
    scores = _labels(scores, "scores")
    targets = _labels(targets, "targets")
    if scores.ndim != 2:
        raise DimensionError(f"scores must be (B, C), got {scores.shape}")
    if targets.ndim == 1:
        targets = one_hot(targets, scores.shape[1])
    if targets.shape != scores.shape:
        raise DimensionError(
            f"scores {scores.shape} vs targets {targets.shape}"
        )
    per_class = [
        average_precision(scores[:, c], targets[:, c])
        for c in range(scores.shape[1])
    ]
    counted = [ap for ap in per_class if not np.isnan(ap)]
    if not counted:
        raise UsageError("no class has a positive target")
    return float(np.mean(counted))


def one_hot(labels: t.Any, num_classes: int) -> np.ndarray:
    """Return a `(B, num_classes)` 0/1 matrix for integer labels."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes, dtype=np.int64)[labels.astype(np.int64)]
