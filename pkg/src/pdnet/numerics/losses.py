from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, as_tensor


def smoothed_targets(labels: np.ndarray, classes: int, smoothing: float) -> np.ndarray:
    """True class gets ``1 - smoothing``; the rest share ``smoothing`` uniformly."""
    q = np.full((len(labels), classes), smoothing / (classes - 1) if classes > 1 else 0.0)
    q[np.arange(len(labels)), labels] = 1.0 - smoothing if classes > 1 else 1.0
    return q


def cross_entropy_label_smoothing(logits, labels, smoothing: float = 0.1) -> Tensor:
    """Mean over rows of -sum_c q_c log softmax(logits)_c."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    b, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError("label outside [0, classes)")

    x = logits.data.astype(np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    q = smoothed_targets(labels, classes, smoothing)
    loss = -(q * logp).sum() / b

    def backward(g):
        return ((g * (np.exp(logp) - q) / b).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
