"""Hybrid segmentation objective: binary cross-entropy plus Dice, on logits."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossValue:
    """Differentiable scalar loss terms; total is exactly bce + dice."""
    total: Tensor
    bce: Tensor
    dice: Tensor


def _check_shapes(logits: Tensor, target: Tensor):
    if logits.shape != target.shape:
        raise ValueError(f"logits shape {logits.shape} != target shape {target.shape}")


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy, numerically stable form.

    max(z,0) - z*t + log(1 + exp(-|z|)), averaged over all elements.
    max(z,0) is written as (z + |z|)/2 so the subgradient choices at z = 0
    cancel and the composed gradient equals sigmoid(z) - t everywhere.
    """
    _check_shapes(logits, target)
    az = T.absval(logits)
    per_pixel = 0.5 * (logits + az) - logits * target + T.log1p(T.exp(-az))
    return T.tmean(per_pixel)


def dice_loss(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss aggregated over the whole batch."""
    _check_shapes(logits, target)
    p = T.sigmoid(logits)
    inter = T.tsum(p * target)
    denom = T.tsum(p) + T.tsum(target) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def total_loss(logits: Tensor, target: Tensor, smooth: float = 1.0) -> LossValue:
    bce = bce_with_logits(logits, target)
    dice = dice_loss(logits, target, smooth=smooth)
    return LossValue(total=bce + dice, bce=bce, dice=dice)
