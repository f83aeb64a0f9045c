"""Differentiable training losses: Dice, BCE and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, clamp, log, mul, tmean, tsum


@dataclass
class LossConfig:
    bce_weight: float = 0.5        # alpha
    dice_weight: float = 0.5       # beta
    dice_smooth: float = 1e-6      # epsilon in the Dice ratio
    prob_clamp: float = 1e-7       # delta applied before BCE logs

    def validate(self):
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dice_smooth <= 0 or self.prob_clamp <= 0:
            raise ValueError("dice_smooth and prob_clamp must be positive")
        return self


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))   # Tensor keeps float32/float64 as given


def _check_pair(p: Tensor, g: Tensor):
    if p.shape != g.shape:
        raise ShapeError(
            f"loss: prediction shape {tuple(p.shape)} != target shape "
            f"{tuple(g.shape)}")


def _sample_axes(t: Tensor):
    # axis 0 is the batch for rank >= 2; a flat vector is one sample
    return tuple(range(1, t.ndim)) if t.ndim > 1 else None


def dice_coef_soft(p, g, smooth: float = 1e-6) -> Tensor:
    """Soft Dice on probabilities, computed per sample then batch-averaged."""
    p, g = _as_tensor(p), _as_tensor(g)
    _check_pair(p, g)
    axes = _sample_axes(p)
    inter = tsum(mul(p, g), axis=axes)
    denom = tsum(p, axis=axes) + tsum(g, axis=axes)
    return tmean((2.0 * inter + smooth) / (denom + smooth))


def dice_loss(p, g, smooth: float = 1e-6) -> Tensor:
    """1 - soft Dice; zero when prediction equals a binary target."""
    return 1.0 - dice_coef_soft(p, g, smooth)


def bce_loss(p, g, prob_clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with probability clamping for finite logs."""
    p, g = _as_tensor(p), _as_tensor(g)
    _check_pair(p, g)
    pc = clamp(p, prob_clamp, 1.0 - prob_clamp)
    pos = mul(g, log(pc))
    neg = mul(1.0 - g, log(1.0 - pc))
    return -tmean(pos + neg)


def total_loss(p, g, config: LossConfig = LossConfig()) -> Tensor:
    """alpha * BCE + beta * Dice, the combined segmentation objective."""
    return (config.bce_weight * bce_loss(p, g, config.prob_clamp)
            + config.dice_weight * dice_loss(p, g, config.dice_smooth))
