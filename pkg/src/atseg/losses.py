"""Training losses and confusion-count metrics for binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .segnet import soft_binarize
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-6
    lambda_mse: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        if self.lambda_mse < 0:
            raise ContractError("lambda_mse must be non-negative")
        if not self.tau > 0:
            raise ContractError("tau must be positive")


def _target_array(target, shape) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float32)
    if t.shape != shape:
        raise ShapeError(f"prediction shape {shape} != target shape {t.shape}")
    return t


def dice_loss(pred: Tensor, target, epsilon: float = 1e-6) -> Tensor:
    """1 - 2*sum(p*t) / (sum(p^2) + sum(t^2) + epsilon), summed over the whole batch."""
    t = _target_array(target, pred.shape)
    p64 = pred.data.astype(np.float64)
    t64 = t.astype(np.float64)
    inter = float(np.sum(p64 * t64))
    denom = float(np.sum(p64 * p64) + np.sum(t64 * t64)) + epsilon
    loss = 1.0 - 2.0 * inter / denom

    def grad_fn(g):
        d = -2.0 * t64 / denom + 4.0 * inter * p64 / denom**2
        return ((np.float64(g) * d).astype(np.float32),)

    return T.record("dice_loss", [pred], np.asarray(loss), grad_fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of (target - pred)^2. Differentiable in both arguments when both are Tensors."""
    tgt = target if isinstance(target, Tensor) else Tensor(target)
    if tgt.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {tgt.shape}")
    diff = tgt.data.astype(np.float64) - pred.data.astype(np.float64)
    n = diff.size
    loss = np.sum(diff * diff) / n

    def grad_fn(g):
        d = (np.float64(g) * 2.0 / n) * diff
        return (-d).astype(np.float32), d.astype(np.float32)

    return T.record("mse_loss", [pred, tgt], np.asarray(loss), grad_fn)


def loss_terms(prob: Tensor, threshold, target, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, dice term, mse term). The mse term is None when lambda_mse is 0."""
    dice = dice_loss(prob, target, cfg.epsilon)
    if cfg.lambda_mse == 0 or threshold is None:
        return dice, dice, None
    mse = mse_loss(soft_binarize(prob, threshold, cfg.tau), target)
    return T.add(dice, T.mul(mse, cfg.lambda_mse)), dice, mse


def combined_loss(prob: Tensor, threshold, target, cfg: LossConfig) -> Tensor:
    return loss_terms(prob, threshold, target, cfg)[0]


@dataclass(frozen=True)
class MetricsRecord:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def dice(self) -> float:
        d = 2 * self.tp + self.fp + self.fn
        return 1.0 if d == 0 else 2 * self.tp / d

    @property
    def iou(self) -> float:
        d = self.tp + self.fp + self.fn
        return 1.0 if d == 0 else self.tp / d

    @property
    def pixel_accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 1.0

    def __add__(self, other: "MetricsRecord") -> "MetricsRecord":
        return MetricsRecord(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_dict(self) -> dict:
        return {
            "dice": self.dice,
            "iou": self.iou,
            "pixel_accuracy": self.pixel_accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


EMPTY_METRICS = MetricsRecord(0, 0, 0, 0)


def _binary(x, what):
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all((a == 0) | (a == 1)):
        raise ContractError(f"{what} must contain only 0 and 1")
    return a.astype(bool)


def compute_metrics(pred_mask, target) -> MetricsRecord:
    p = _binary(pred_mask, "pred_mask")
    t = _binary(target, "target")
    if p.shape != t.shape:
        raise ShapeError(f"pred_mask shape {p.shape} != target shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return MetricsRecord(tp, fp, fn, p.size - tp - fp - fn)


def aggregate(records) -> MetricsRecord:
    """Micro-average: pool the confusion counts."""
    total = EMPTY_METRICS
    for r in records:
        total = total + r
    return total
