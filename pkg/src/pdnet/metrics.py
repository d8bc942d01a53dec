"""Classification and segmentation scores from a confusion matrix."""

from __future__ import annotations

import numpy as np


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts items with true class t predicted as p."""
    labels = np.asarray(labels).ravel()
    predictions = np.asarray(predictions).ravel()
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes
                        or predictions.min() < 0 or predictions.max() >= num_classes):
        raise ValueError("class index out of range")
    return np.bincount(labels * num_classes + predictions,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def overall_accuracy(cm) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def mean_accuracy(cm) -> float:
    """Mean per-class recall over classes present in the ground truth."""
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        return 0.0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def mean_iou(cm) -> float:
    """Mean over classes of TP / (TP + FP + FN); classes absent from both sides are skipped."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        return 0.0
    return float(np.mean(tp[present] / union[present]))


def report(labels, predictions, num_classes: int) -> dict[str, float]:
    cm = confusion_matrix(labels, predictions, num_classes)
    return {"oa": overall_accuracy(cm), "macc": mean_accuracy(cm), "miou": mean_iou(cm)}
