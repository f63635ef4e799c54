"""Training losses: capsule margin loss, log-cosh regression loss, cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


def _one_hot_check(targets: np.ndarray, shape) -> np.ndarray:
    t = np.asarray(targets)
    if t.shape != tuple(shape):
        raise ValueError(f"targets shape {t.shape} does not match lengths shape {tuple(shape)}")
    if not (np.isin(t, (0, 1)).all() and (t.sum(axis=1) == 1).all()):
        raise ValueError("margin loss targets must be one-hot rows")
    return t


def margin_loss(lengths: Tensor, targets, cfg: MarginLossConfig = MarginLossConfig()) -> Tensor:
    """Batch mean of sum_k T_k max(0, m+ - |v_k|)^2 + lam (1 - T_k) max(0, |v_k| - m-)^2."""
    t = _one_hot_check(targets, lengths.shape).astype(lengths.dtype)
    present = ops.square(ops.relu(ops.add(ops.scale(lengths, -1.0), cfg.m_plus)))
    absent = ops.square(ops.relu(ops.sub(lengths, cfg.m_minus)))
    per = ops.add(ops.mul(present, Tensor(t)), ops.mul(absent, Tensor(cfg.lam * (1 - t))))
    return ops.mean(ops.sum(per, axis=1))


def logcosh_loss(y_pred: Tensor, y, reduction: str = "sum") -> Tensor:
    """sum_i log(cosh(y_pred_i - y_i)); ``reduction="mean"`` divides by n."""
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=y_pred.dtype))
    if y.size != y_pred.size:
        raise ValueError(f"log-cosh length mismatch: {y_pred.shape} vs {y.shape}")
    if y.shape != y_pred.shape:
        y = ops.reshape(y, y_pred.shape)
    per = ops.logcosh(ops.sub(y_pred, y))
    if reduction == "sum":
        return ops.sum(per)
    if reduction == "mean":
        return ops.mean(per)
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return ops.scale(ops.sum(ops.mul(ops.log_softmax(logits, axis=1), Tensor(onehot))), -1.0 / len(labels))
