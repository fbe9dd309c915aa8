"""Cross-entropy losses for both heads and the combined multi-task objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

CLAMP_EPS = 1e-7


@dataclass
class MultiTaskLossConfig:
    w_cls: float = 1.0
    w_seg: float = 1.0
    lam: float = 0.0
    clamp_eps: float = CLAMP_EPS

    def __post_init__(self) -> None:
        if self.w_cls < 0 or self.w_seg < 0:
            raise ConfigError("task weights must be non-negative")
        if self.w_cls == 0 and self.w_seg == 0:
            raise ConfigError("at least one task weight must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if not 0 < self.clamp_eps < 0.5:
            raise ConfigError("clamp_eps must lie in (0, 0.5)")


def _clamp(p: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamped probabilities plus the mask where the clamp is inactive."""
    pc = np.clip(p, eps, 1.0 - eps)
    return pc, (p >= eps) & (p <= 1.0 - eps)


def _fused_source(pred: Tensor, op: str) -> Tensor | None:
    """The pre-activation input of ``pred`` if it was produced by ``op`` inside the graph."""
    if pred.op == op and len(pred._parents) == 1:
        return pred._parents[0]
    return None


def cross_entropy_class(pred: Tensor, labels, clamp_eps: float = CLAMP_EPS) -> Tensor:
    """Mean negative log-likelihood of the true class under ``pred``.

    ``pred`` is a [batch, 2] probability table, ``labels`` a class index per
    row (0 non-nodule, 1 nodule).

    When ``pred`` comes straight from :func:`softmax` the gradient is sent to
    the logits as ``(p - onehot) / batch``.  That is the exact gradient
    wherever the clamp is inactive, and it keeps a saturated head trainable
    where the clamp would otherwise zero it.
    """
    labels = np.asarray(labels)
    if pred.ndim != 2:
        raise ShapeError(f"class predictions must be [batch, classes], got {pred.shape}")
    if labels.shape != (pred.shape[0],):
        raise ShapeError(f"expected {pred.shape[0]} labels, got shape {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError(f"class labels must be 0 or 1, got {np.unique(labels).tolist()}")
    labels = labels.astype(np.intp)
    rows = np.arange(pred.shape[0])
    picked = pred.data[rows, labels]
    pc, live = _clamp(picked, clamp_eps)
    b = pred.shape[0]
    loss = np.asarray(-np.log(pc).mean(), dtype=pred.data.dtype)

    logits = _fused_source(pred, "softmax")
    if logits is not None:
        p = pred.data

        def back_fused(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return (d * (g / b),)

        return Tensor._from_op(loss, (logits,), back_fused, "cross_entropy_class")

    def back(g):
        gp = np.zeros_like(pred.data)
        gp[rows, labels] = np.where(live, -g / (pc * b), 0.0)
        return (gp,)

    return Tensor._from_op(loss, (pred,), back, "cross_entropy_class")


def cross_entropy_voxel(
    pred_mask: Tensor, true_mask, sample_mask=None, clamp_eps: float = CLAMP_EPS
) -> Tensor:
    """Mean binary cross entropy over voxels.

    ``sample_mask`` (bool per batch item) restricts the mean to the samples
    that actually carry a mask; with no selected samples the loss is 0.
    A ``pred_mask`` produced by :func:`sigmoid` is differentiated through its
    input, as in :func:`cross_entropy_class`.
    """
    y = np.asarray(true_mask, dtype=pred_mask.data.dtype)
    if y.shape != pred_mask.shape:
        raise ShapeError(f"mask shape {y.shape} does not match prediction shape {pred_mask.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("true mask must be binary")
    p = pred_mask.data
    pc, live = _clamp(p, clamp_eps)
    if sample_mask is None:
        sel = np.ones(p.shape[0], dtype=bool)
    else:
        sel = np.asarray(sample_mask, dtype=bool)
        if sel.shape != (p.shape[0],):
            raise ShapeError(f"sample_mask must have one entry per batch item, got {sel.shape}")
    weight = sel.reshape((-1,) + (1,) * (p.ndim - 1)).astype(p.dtype)
    n = int(sel.sum()) * (p[0].size if p.shape[0] else 0)
    if n == 0:
        return Tensor._from_op(np.zeros((), dtype=p.dtype), (pred_mask,), lambda g: (np.zeros_like(p),), "cross_entropy_voxel")
    per_voxel = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    loss = np.asarray((per_voxel * weight).sum() / n, dtype=p.dtype)

    pre = _fused_source(pred_mask, "sigmoid")
    if pre is not None:
        return Tensor._from_op(loss, (pre,), lambda g: ((p - y) * weight * (g / n),), "cross_entropy_voxel")

    def back(g):
        d = (-y / pc + (1.0 - y) / (1.0 - pc)) * live * weight
        return (d * (g / n),)

    return Tensor._from_op(loss, (pred_mask,), back, "cross_entropy_voxel")


def l2_penalty(params: Iterable[Tensor]) -> Tensor:
    total = None
    for p in params:
        term = (p * p).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def multi_task_loss(
    class_loss: Tensor, seg_loss: Tensor, params: Iterable[Tensor], cfg: MultiTaskLossConfig
) -> Tensor:
    """Weighted task sum plus ``lam`` times the squared L2 norm of ``params``.

    A task with weight 0 is dropped from the graph entirely, so its head
    receives no gradient (single-task baselines run through this same path).
    """
    total = None
    if cfg.w_cls:
        total = class_loss * cfg.w_cls
    if cfg.w_seg:
        term = seg_loss * cfg.w_seg
        total = term if total is None else total + term
    if cfg.lam:
        total = total + l2_penalty(params) * cfg.lam
    return total
