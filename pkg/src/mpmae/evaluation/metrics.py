"""Downstream metrics: micro-F1 (multi-label), overall accuracy, macro-IoU."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument


def _pair(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != label shape {labels.shape}")
    if pred.size == 0:
        raise InvalidArgument("empty input")
    return pred, labels


def micro_f1(pred, labels) -> float:
    """F1 from TP/FP/FN pooled over every class and sample.

    Inputs are (N, K) binary indicator arrays. When neither side has a
    single positive the score is 1.0.
    """
    pred, labels = _pair(pred, labels)
    p, t = pred.astype(bool), labels.astype(bool)
    tp = np.count_nonzero(p & t)
    fp = np.count_nonzero(p & ~t)
    fn = np.count_nonzero(~p & t)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def overall_accuracy(pred, labels) -> float:
    pred, labels = _pair(pred, labels)
    return float(np.count_nonzero(pred == labels) / pred.size)


def iou_per_class(pred, labels, num_classes: int, ignore_label: int | None = None) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and label.

    A prediction outside ``[0, num_classes)`` counts as a miss for the true
    class and as a false positive for none.
    """
    pred, labels = _pair(pred, labels)
    keep = np.ones(pred.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    p, t = pred[keep].astype(np.int64), labels[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise InvalidArgument(f"label outside [0, {num_classes})")
    in_range = (p >= 0) & (p < num_classes)
    tp = np.bincount(t[p == t], minlength=num_classes).astype(np.float64)
    union = np.bincount(p[in_range], minlength=num_classes) + np.bincount(t, minlength=num_classes) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def macro_iou(pred, labels, num_classes: int, ignore_label: int | None = None) -> float:
    """Unweighted mean IoU over classes present in prediction or label."""
    iou = iou_per_class(pred, labels, num_classes, ignore_label)
    present = ~np.isnan(iou)
    if not present.any():
        raise InvalidArgument("no scoreable pixels")
    return float(iou[present].mean())
