"""Optimization recipe: AdamW, cosine annealing, gradient clipping, EMA,
gradient accumulation, plus validation, test-time augmentation and ensembling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Graph, Tensor, backward
from .data import AugmentConfig, SegmentationSample, augment, normalize_imagenet
from .losses import LossConfig, total_loss
from .metrics import dice_coef, iou as iou_metric
from .model import MedLiteNet, predict_mask
from . import checkpoint as ckpt

CSV_HEADER = ("epoch", "split", "loss", "dice", "iou", "lr")


class NumericalError(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""


@dataclass
class TrainConfig:
    batch_size: int = 4                 # desk-scale default; the paper used 16
    epochs: int = 300
    lr0: float = 1e-3
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 0.5
    ema_decay: float = 0.999
    accumulation: int = 2
    seed: int = 0
    augment: bool = True

    def validate(self):
        if min(self.batch_size, self.epochs, self.accumulation) < 1:
            raise ValueError("batch_size, epochs and accumulation must be >= 1")
        if min(self.lr0, self.lr_min, self.eps, self.clip_norm) <= 0:
            raise ValueError("lr0, lr_min, eps and clip_norm must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Optimizer, schedule, clipping, EMA
# ---------------------------------------------------------------------------

class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Normalization affine parameters (flagged ``decay_exempt``) are excluded
    from the decay term.  A NaN gradient aborts the step, naming the tensor.
    """

    def __init__(self, named_params: Sequence[tuple], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(p.data)
                        for name, p in self.named_params}
        self.exp_avg_sq = {name: np.zeros_like(p.data)
                           for name, p in self.named_params}

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if np.isnan(g).any():
                raise NumericalError(f"NaN gradient in parameter {name!r}; "
                                     f"step {t} aborted")
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            if self.weight_decay and not p.decay_exempt:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {"exp_avg": dict(self.exp_avg),
                "exp_avg_sq": dict(self.exp_avg_sq),
                "step": self.step_count}

    def load_state_dict(self, state: dict):
        self.exp_avg = {k: np.array(v) for k, v in state["exp_avg"].items()}
        self.exp_avg_sq = {k: np.array(v)
                           for k, v in state["exp_avg_sq"].items()}
        self.step_count = int(state["step"])


def cosine_lr(epoch: int, total_epochs: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from lr0 (epoch 0) down to lr_min (epoch == total)."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch
                                                           / total_epochs))


def clip_grad_norm(params, max_norm: float = 0.5) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the applied scale (1.0 when no clipping was needed).
    """
    total = 0.0
    grads = []
    for p in params:
        if p.grad is not None:
            grads.append(p.grad)
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


class EmaState:
    """Exponential moving average of the trainable tensors.

    The shadow accumulates from zero with ``shadow <- d*shadow + (1-d)*param``;
    ``averaged()`` divides out the (1 - d^t) startup bias so evaluation
    weights track the parameter trajectory from the very first update instead
    of being dragged toward zero (or toward the random init) by the long
    0.999 time constant.  BatchNorm running stats are shadowed the same way:
    averaged weights need stats from the same trajectory window, not the
    final model's.
    """

    def __init__(self, named_params: Sequence[tuple], decay: float = 0.999,
                 named_states: Sequence[tuple] = ()):
        self.decay = decay
        self.num_updates = 0
        self.named_params = list(named_params)
        self.named_states = list(named_states)
        self.shadow = {name: np.zeros_like(p.data)
                       for name, p in self.named_params}
        self.stat_shadow = {}
        for name, state in self.named_states:
            self.stat_shadow[name + ".mean"] = np.zeros_like(state.mean)
            self.stat_shadow[name + ".var"] = np.zeros_like(state.var)

    def update(self):
        self.num_updates += 1
        d = self.decay
        for name, p in self.named_params:
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * p.data
        for name, state in self.named_states:
            for key, live in ((name + ".mean", state.mean),
                              (name + ".var", state.var)):
                s = self.stat_shadow[key]
                s *= d
                s += (1.0 - d) * live

    def averaged(self) -> dict:
        """Bias-corrected evaluation weights."""
        if self.num_updates == 0:
            return {name: p.data.copy() for name, p in self.named_params}
        corr = 1.0 - self.decay ** self.num_updates
        return {name: s / corr for name, s in self.shadow.items()}

    def averaged_states(self) -> dict:
        if self.num_updates == 0:
            return {}
        corr = 1.0 - self.decay ** self.num_updates
        return {key: s / corr for key, s in self.stat_shadow.items()}


class _SwappedWeights:
    """Temporarily substitute model parameters (used for EMA validation)."""

    def __init__(self, model: MedLiteNet, weights: dict, stats: dict = None):
        self.model = model
        self.weights = weights
        self.stats = stats or {}
        self.saved = {}
        self.saved_stats = {}

    def __enter__(self):
        for name, p in self.model.named_parameters():
            self.saved[name] = p.data
            p.data = self.weights[name].astype(p.data.dtype, copy=False)
        for name, state in self.model.named_states():
            if name + ".mean" in self.stats:
                self.saved_stats[name] = (state.mean, state.var)
                state.mean = self.stats[name + ".mean"].astype(
                    state.mean.dtype, copy=False)
                state.var = self.stats[name + ".var"].astype(
                    state.var.dtype, copy=False)
        return self

    def __exit__(self, exc_type, exc, tb):
        for name, p in self.model.named_parameters():
            p.data = self.saved[name]
        for name, state in self.model.named_states():
            if name in self.saved_stats:
                state.mean, state.var = self.saved_stats[name]
        return False


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------

def batch_arrays(samples: Sequence[SegmentationSample]) -> tuple:
    images = np.stack([normalize_imagenet(s.image) for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images.astype(np.float32), masks.astype(np.float32)


def evaluate(model: MedLiteNet, samples: Sequence[SegmentationSample],
             batch_size: int = 4, loss_config: LossConfig = LossConfig(),
             threshold: float = 0.5) -> dict:
    """Eval-mode loss/Dice/IoU over a sample list (per-sample metric means)."""
    model.eval()
    losses, dices, ious = [], [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images, masks = batch_arrays(chunk)
        probs = model(Tensor(images))
        losses.append(float(total_loss(probs, Tensor(masks), loss_config).item())
                      * len(chunk))
        hard = predict_mask(probs, threshold)
        for j in range(len(chunk)):
            dices.append(dice_coef(hard[j], masks[j]))
            ious.append(iou_metric(hard[j], masks[j]))
    n = len(samples)
    return {"loss": sum(losses) / n, "dice": float(np.mean(dices)),
            "iou": float(np.mean(ious))}


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_val_dice: float
    best_checkpoint: Optional[str]
    last_checkpoint: Optional[str]
    step_losses: list = field(default_factory=list)


def fit(model: MedLiteNet, train_samples: Sequence[SegmentationSample],
        val_samples: Sequence[SegmentationSample], config: TrainConfig,
        out_dir=None, loss_config: LossConfig = LossConfig(),
        augment_config: Optional[AugmentConfig] = None,
        max_steps: Optional[int] = None,
        log_fn: Optional[Callable[[str], None]] = None) -> FitResult:
    """Run the full training recipe; deterministic given config and seeds.

    Gradients accumulate over ``config.accumulation`` micro-batches and are
    averaged before clipping and the AdamW step.  Validation runs each epoch
    with the EMA weights in eval mode; the best-val-Dice checkpoint is kept.
    """
    config.validate()
    loss_config.validate()
    named = list(model.named_parameters())
    opt = AdamW(named, lr=config.lr0, betas=(config.beta1, config.beta2),
                eps=config.eps, weight_decay=config.weight_decay)
    ema = EmaState(named, decay=config.ema_decay,
                   named_states=list(model.named_states()))
    aug_cfg = augment_config or AugmentConfig()

    out = Path(out_dir) if out_dir is not None else None
    csv_file = csv_writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_file = open(out / "metrics.csv", "w", newline="")
        csv_writer = csv.writer(csv_file)
        csv_writer.writerow(CSV_HEADER)

    history = []
    step_losses = []
    best_epoch, best_val_dice = -1, -1.0
    opt_steps = 0
    micro_since_step = 0
    stop = False

    try:
        for epoch in range(config.epochs):
            lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
            rng = np.random.default_rng([config.seed, 7919, epoch])
            order = rng.permutation(len(train_samples))

            model.train()
            epoch_losses, epoch_dices, epoch_ious = [], [], []
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = [train_samples[i] for i in idx]
                if config.augment:
                    batch = [augment(s, aug_cfg, seed=config.seed + 1_000_003 * epoch)
                             for s in batch]
                images, masks = batch_arrays(batch)
                with Graph() as graph:
                    probs = model(Tensor(images))
                    loss = total_loss(probs, Tensor(masks), loss_config)
                    loss_val = loss.item()
                    if not math.isfinite(loss_val):
                        raise NumericalError(
                            f"non-finite loss {loss_val} at optimizer step "
                            f"{opt_steps} (lr={lr:.3e})")
                    backward(loss, graph)
                step_losses.append(loss_val)
                epoch_losses.append(loss_val * len(batch))
                hard = predict_mask(probs)
                for j in range(len(batch)):
                    epoch_dices.append(dice_coef(hard[j], masks[j]))
                    epoch_ious.append(iou_metric(hard[j], masks[j]))

                micro_since_step += 1
                if micro_since_step == config.accumulation:
                    _apply_step(named, opt, ema, config, lr, micro_since_step)
                    micro_since_step = 0
                    opt_steps += 1
                    if max_steps is not None and opt_steps >= max_steps:
                        stop = True
                        break
            if micro_since_step:
                _apply_step(named, opt, ema, config, lr, micro_since_step)
                micro_since_step = 0
                opt_steps += 1

            train_row = {
                "epoch": epoch, "split": "train",
                "loss": sum(epoch_losses) / len(train_samples),
                "dice": float(np.mean(epoch_dices)),
                "iou": float(np.mean(epoch_ious)), "lr": lr,
            }
            with _SwappedWeights(model, ema.averaged(), ema.averaged_states()):
                val_stats = evaluate(model, val_samples, config.batch_size,
                                     loss_config)
            val_row = {"epoch": epoch, "split": "val", "lr": lr, **val_stats}
            history.extend([train_row, val_row])
            for row in (train_row, val_row):
                if csv_writer is not None:
                    csv_writer.writerow([row["epoch"], row["split"],
                                         f"{row['loss']:.6f}",
                                         f"{row['dice']:.6f}",
                                         f"{row['iou']:.6f}",
                                         f"{row['lr']:.8e}"])
            if csv_file is not None:
                csv_file.flush()
            if log_fn is not None:
                log_fn(f"epoch {epoch:3d}  lr {lr:.2e}  "
                       f"train loss {train_row['loss']:.4f} "
                       f"dice {train_row['dice']:.4f}  "
                       f"val loss {val_row['loss']:.4f} "
                       f"dice {val_row['dice']:.4f}")

            if val_row["dice"] > best_val_dice:
                best_val_dice = val_row["dice"]
                best_epoch = epoch
                if out is not None:
                    # the best checkpoint stores the weights that actually
                    # scored best: the EMA evaluation weights and their stats
                    with _SwappedWeights(model, ema.averaged(),
                                         ema.averaged_states()):
                        ckpt.save_checkpoint(
                            model, out / "best.ckpt",
                            meta={"epoch": epoch,
                                  "best_val_dice": best_val_dice})
            if stop:
                break
    finally:
        if csv_file is not None:
            csv_file.close()

    last_path = None
    if out is not None:
        last_path = out / "last.ckpt"
        ema_table = ema.averaged()
        for key, value in ema.averaged_states().items():
            if key.endswith(".mean"):
                ema_table[key[:-5] + ".running_mean"] = value
            else:
                ema_table[key[:-4] + ".running_var"] = value
        ckpt.save_checkpoint(
            model, last_path, ema_shadow=ema_table,
            optimizer_state=opt.state_dict(),
            meta={"epoch": history[-1]["epoch"] if history else -1,
                  "best_val_dice": best_val_dice})
    model.eval()
    return FitResult(history=history, best_epoch=best_epoch,
                     best_val_dice=best_val_dice,
                     best_checkpoint=str(out / "best.ckpt") if out else None,
                     last_checkpoint=str(last_path) if last_path else None,
                     step_losses=step_losses)


def _apply_step(named, opt, ema, config, lr, micro_count):
    if micro_count > 1:
        inv = 1.0 / micro_count
        for _, p in named:
            if p.grad is not None:
                p.grad *= inv
    clip_grad_norm([p for _, p in named], config.clip_norm)
    opt.step(lr=lr)
    ema.update()
    opt.zero_grad()


# ---------------------------------------------------------------------------
# Test-time augmentation and ensembling
# ---------------------------------------------------------------------------

_TTA_NAMES = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def _tta_apply(arr: np.ndarray, name: str) -> np.ndarray:
    if name == "identity":
        return arr
    if name == "hflip":
        return arr[..., ::-1]
    if name == "vflip":
        return arr[..., ::-1, :]
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[name]
    return np.rot90(arr, k, axes=(-2, -1))


def _tta_invert(arr: np.ndarray, name: str) -> np.ndarray:
    if name in ("identity", "hflip", "vflip", "rot180"):
        return _tta_apply(arr, name)
    return np.rot90(arr, -{"rot90": 1, "rot270": 3}[name], axes=(-2, -1))


def tta_predict(predict_fn, image: np.ndarray) -> np.ndarray:
    """Six-fold TTA: mean of inverse-transformed predictions.

    ``predict_fn`` maps an NCHW float32 batch to an NCHW probability batch
    (e.g. an eval-mode model).  Accumulation runs in float64 so the mean of
    six identical branches reproduces them bitwise after the float32 cast.
    """
    image = np.asarray(image, dtype=np.float32)
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    acc = None
    for name in _TTA_NAMES:
        transformed = np.ascontiguousarray(_tta_apply(image, name))
        pred = np.asarray(_call_predict(predict_fn, transformed))
        restored = np.ascontiguousarray(_tta_invert(pred, name)).astype(np.float64)
        acc = restored if acc is None else acc + restored
    result = (acc / len(_TTA_NAMES)).astype(np.float32)
    return result[0] if squeeze else result


def _call_predict(predict_fn, batch: np.ndarray) -> np.ndarray:
    if isinstance(predict_fn, MedLiteNet):
        predict_fn.eval()
        return predict_fn(Tensor(batch)).data
    out = predict_fn(batch)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def ensemble_weights(val_dices: Sequence[float]) -> np.ndarray:
    """Performance weights w_i = dice_i / sum(dice)."""
    dices = np.asarray(val_dices, dtype=np.float64)
    if dices.size == 0:
        raise ValueError("ensemble needs at least one member")
    if (dices < 0).any() or dices.sum() <= 0:
        raise ValueError("validation Dice scores must be non-negative and "
                         "not all zero")
    return dices / dices.sum()


def ensemble_predict(predict_fns: Sequence, val_dices: Sequence[float],
                     image: np.ndarray) -> np.ndarray:
    """Probability-map average weighted by each member's validation Dice."""
    if len(predict_fns) != len(val_dices):
        raise ValueError("one validation Dice per model is required")
    weights = ensemble_weights(val_dices)
    image = np.asarray(image, dtype=np.float32)
    squeeze = image.ndim == 3
    batch = image[None] if squeeze else image
    acc = None
    for w, fn in zip(weights, predict_fns):
        pred = np.asarray(_call_predict(fn, batch), dtype=np.float64)
        if acc is not None and pred.shape != acc.shape:
            raise ValueError(
                f"ensemble member output shape {pred.shape} does not match "
                f"{acc.shape}")
        acc = w * pred if acc is None else acc + w * pred
    result = acc.astype(np.float32)
    return result[0] if squeeze else result
