"""Loss functions: stable softmax cross-entropy, the per-step temporal
loss on readout traces, and the weighted total objective.

Cross-entropy accepts soft targets (the unsupervised branch trains against
soft pseudo-labels) and is computed through log-sum-exp so logits up to
~1e4 in magnitude stay finite. Natural logarithm throughout.
"""

from __future__ import annotations

import numpy as np


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def cross_entropy(target, logits) -> float | np.ndarray:
    """``H(target, softmax(logits))`` along the last axis.

    ``target`` must be a distribution (sums to 1 within 1e-6); soft targets
    are allowed. Vector inputs give a scalar, stacked rows give an array.
    """
    target = np.asarray(target, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if target.shape != logits.shape:
        raise ValueError(
            f"shape mismatch: target {target.shape} vs logits {logits.shape}"
        )
    sums = np.sum(target, axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(target < -1e-12):
        raise ValueError("target rows must be probability distributions")
    h = -np.sum(target * log_softmax(logits), axis=-1)
    return float(h) if h.ndim == 0 else h


def tet_loss(outputs, labels_onehot) -> float:
    """Mean cross-entropy over every time step and batch element.

    ``outputs`` has shape (T, B, C) (a readout trace batch), ``labels_onehot``
    shape (B, C). Each step's readout is optimized individually; at T = 1
    this is exactly the mean cross-entropy over the batch.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    labels_onehot = np.asarray(labels_onehot, dtype=np.float64)
    if outputs.ndim != 3:
        raise ValueError(f"outputs must be (T, B, C), got shape {outputs.shape}")
    if labels_onehot.shape != outputs.shape[1:]:
        raise ValueError(
            f"labels shape {labels_onehot.shape} does not match outputs {outputs.shape}"
        )
    per_step = cross_entropy(np.broadcast_to(labels_onehot, outputs.shape), outputs)
    return float(np.mean(per_step))


def total_loss(loss_s: float, loss_u: float, lam: float) -> float:
    """Weighted objective ``loss_s + lam * loss_u``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return loss_s + lam * loss_u
