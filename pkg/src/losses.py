"""
Scalar objectives: negative cosine similarity, the symmetrised non-contrastive
loss over online/target networks, cross-entropy and the weighted total used by
joint training.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from autodiff.tensor import (
    Tensor,
    add,
    l2_normalize,
    log,
    log_softmax,
    mul,
    neg,
    pick,
    scale,
    tensor_mean,
    tensor_sum,
)
from custom_types import LabelId
from errors import ContractError, DimensionError

NORMALIZATION_TOLERANCE = 1e-9


class TwoBranchNetwork(Protocol):
    def predict_online(self, samples: Sequence) -> Tensor: ...

    def project_target(self, samples: Sequence) -> Tensor: ...


def d_loss(z: Tensor, h: Tensor) -> Tensor:
    """
    Negative cosine similarity ``-<z/|z|, h/|h|>``.

    For 2-D inputs the rows are paired and the mean over rows is returned.
    Gradient reaches ``h`` unless the caller passed it through ``stop_gradient``.
    """
    if z.shape != h.shape:
        raise DimensionError("d_loss needs equally shaped inputs", z.shape, h.shape)
    cosine = tensor_sum(mul(l2_normalize(z), l2_normalize(h)), axis=-1)
    if cosine.ndim:
        cosine = tensor_mean(cosine)
    return neg(cosine)


def byol_loss(x1: Sequence, x2: Sequence, nets: TwoBranchNetwork) -> Tensor:
    """
    ``1/2 D(z1, h2) + 1/2 D(z2, h1)`` averaged over the aligned samples of
    ``x1`` and ``x2``: ``z`` are online predictions, ``h`` target projections
    (already cut from the graph by ``nets``).
    """
    z1 = nets.predict_online(x1)
    z2 = nets.predict_online(x2)
    h1 = nets.project_target(x1)
    h2 = nets.project_target(x2)
    return add(scale(d_loss(z1, h2), 0.5), scale(d_loss(z2, h1), 0.5))


def cross_entropy(y: np.ndarray, y_hat: Tensor) -> Tensor:
    """
    ``-(1/N) sum_i y_i . log(y_hat_i)`` for one-hot ``y`` and probability rows
    ``y_hat``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 2:
        raise DimensionError("cross_entropy needs matching [N x K] inputs", y.shape, y_hat.shape)
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise ContractError("every target row must be one-hot")
    if np.any(y_hat.data < 0.0) or np.any(np.abs(y_hat.data.sum(axis=1) - 1.0) > NORMALIZATION_TOLERANCE):
        raise ContractError("every prediction row must be a probability distribution")
    truth = y.argmax(axis=1)
    if np.any(y_hat.data[np.arange(len(truth)), truth] == 0.0):
        raise ContractError("a prediction row gives zero probability to its true class")
    return neg(tensor_mean(log(pick(y_hat, truth))))


def cross_entropy_with_logits(logits: Tensor, labels: Sequence[LabelId]) -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels, via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("one label per logit row expected", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError("label id outside the logit columns", logits.shape, (int(labels.max()),))
    return neg(tensor_mean(pick(log_softmax(logits), labels)))


def total_loss(cls: Tensor, cont: Tensor, lam: float) -> Tensor:
    """``cls + lam * cont``."""
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    return add(cls, scale(cont, lam))
