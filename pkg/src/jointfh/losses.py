"""Loss terms of the joint objective and the class-center update.

All reductions are sums over the batch. The center-loss feature gradient is
``x - m`` (centers held fixed), half of what differentiating the squared
distance would give; the factor is absorbed by the center-loss weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SoftmaxParams:
    W: np.ndarray  # [k, d]
    b: np.ndarray  # [k]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]


@dataclass
class CenterBank:
    M: np.ndarray  # [k, d], row j is the center of class j
    gamma: float = 0.5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta1: float = 1.0
    beta2: float = 0.008

    def __post_init__(self):
        if min(self.alpha, self.beta1, self.beta2) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossResult:
    loss: float
    loss_h: float
    loss_c: float
    loss_d: float
    grad_pred_hr: np.ndarray | None
    grad_x: np.ndarray | None
    grad_W: np.ndarray | None
    grad_b: np.ndarray | None


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def hallucination_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {list(pred.shape)} vs {list(gt.shape)}")
    diff = pred - gt
    return float(np.sum(diff * diff)), 2.0 * diff


def softmax_loss(features: np.ndarray, labels, params: SoftmaxParams):
    """Summed cross-entropy of ``W x + b``.

    Returns ``(loss, grad_x, grad_W, grad_b)``.
    """
    labels = _check_labels(labels, params.num_classes)
    n = features.shape[0]
    logits = features @ params.W.T + params.b
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.sum(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs @ params.W, probs.T @ features, probs.sum(axis=0)


def center_loss(features: np.ndarray, labels, bank: CenterBank) -> tuple[float, np.ndarray]:
    labels = _check_labels(labels, bank.M.shape[0])
    diff = features - bank.M[labels]
    return float(np.sum(diff * diff)), diff


def center_update(bank: CenterBank, features: np.ndarray, labels) -> CenterBank:
    """One mini-batch center step: ``m_j -= gamma * sum_i[c_i=j](m_j - x_i) / (1 + n_j)``."""
    k = bank.M.shape[0]
    labels = _check_labels(labels, k)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros_like(bank.M)
    np.add.at(sums, labels, features)
    delta = (counts[:, None] * bank.M - sums) / (1.0 + counts[:, None])
    return CenterBank(bank.M - bank.gamma * delta, bank.gamma)


def combined_loss(pred_hr, gt_hr, features, labels, params: SoftmaxParams, bank: CenterBank,
                  weights: LossWeights) -> LossResult:
    """Weighted joint loss and the two gradient streams backprop needs.

    ``grad_pred_hr`` is injected at the hallucination output; ``grad_x`` starts
    the recognition backward pass. Either image or feature inputs may be
    ``None`` when that branch is not in use.
    """
    loss_h = loss_c = loss_d = 0.0
    grad_pred = grad_x = grad_W = grad_b = None
    if pred_hr is not None:
        loss_h, g = hallucination_loss(pred_hr, gt_hr)
        grad_pred = weights.alpha * g
    if features is not None:
        loss_c, gx_c, grad_W, grad_b = softmax_loss(features, labels, params)
        loss_d, gx_d = center_loss(features, labels, bank)
        grad_x = weights.beta1 * gx_c + weights.beta2 * gx_d
        grad_W = weights.beta1 * grad_W
        grad_b = weights.beta1 * grad_b
    total = weights.alpha * loss_h + weights.beta1 * loss_c + weights.beta2 * loss_d
    return LossResult(total, loss_h, loss_c, loss_d, grad_pred, grad_x, grad_W, grad_b)
