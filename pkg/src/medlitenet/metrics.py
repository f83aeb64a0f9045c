"""Hard-mask evaluation metrics (no gradients involved)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class EvalRecord:
    dice: float
    iou: float
    accuracy: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int


def _as_binary(mask, name: str) -> np.ndarray:
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be strictly binary (0/1)")
    return arr.astype(bool)


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(
            f"mask shapes differ: {pred.shape} vs {gt.shape}")


def dice_coef(pred_mask, gt_mask) -> float:
    """Hard Dice overlap; both-empty masks score 1 by convention."""
    p = _as_binary(pred_mask, "pred_mask")
    g = _as_binary(gt_mask, "gt_mask")
    _check_shapes(p, g)
    inter = int(np.count_nonzero(p & g))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def iou(pred_mask, gt_mask) -> float:
    """Intersection over union; both-empty masks score 1 by convention."""
    p = _as_binary(pred_mask, "pred_mask")
    g = _as_binary(gt_mask, "gt_mask")
    _check_shapes(p, g)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return inter / union


def dice_from_iou(value: float) -> float:
    """Dice = 2*IoU / (IoU + 1), the exact algebraic relation."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"iou must lie in [0, 1], got {value}")
    return 2.0 * value / (value + 1.0)


def confusion_metrics(pred_mask, gt_mask) -> EvalRecord:
    """Pixel confusion counts plus the derived rates.

    Sensitivity defaults to 1 when the ground truth has no positives, and
    specificity to 1 when it has no negatives.
    """
    p = _as_binary(pred_mask, "pred_mask")
    g = _as_binary(gt_mask, "gt_mask")
    _check_shapes(p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    n = tp + fp + tn + fn
    return EvalRecord(
        dice=dice_coef(p.astype(np.uint8), g.astype(np.uint8)),
        iou=iou(p.astype(np.uint8), g.astype(np.uint8)),
        accuracy=(tp + tn) / n,
        sensitivity=tp / (tp + fn) if tp + fn else 1.0,
        specificity=tn / (tn + fp) if tn + fp else 1.0,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )
