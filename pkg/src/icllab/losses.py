"""The two training losses: MSE for regression, softmax CE for classification."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    d = T.sub(pred, target)
    return T.mean(T.mul(d, d))


def cross_entropy_loss(logits: Tensor, class_idx: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer class indices."""
    idx = np.asarray(class_idx, dtype=np.int64).reshape(-1)
    n_classes = logits.shape[-1]
    onehot = np.zeros((idx.size, n_classes))
    onehot[np.arange(idx.size), idx] = 1.0
    flat = T.reshape(logits, (idx.size, n_classes))
    return T.softmax_cross_entropy(flat, Tensor(onehot))
