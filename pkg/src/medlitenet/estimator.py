"""Scikit-learn style estimator wrapper around the segmentation stack.

``MedLiteNetSegmenter`` follows the sklearn estimator contract without
importing sklearn: constructor arguments are stored verbatim, ``get_params``
/ ``set_params`` introspect the signature, fitted state lives in trailing-
underscore attributes, and ``fit`` returns ``self`` -- so the class works
with ``sklearn.base.clone``, pipelines and model-selection utilities.
"""

from __future__ import annotations

import inspect

import numpy as np

from .autodiff import Tensor
from .data import AugmentConfig, SegmentationSample
from .model import MedLiteNet, ModelConfig, predict_mask
from .metrics import dice_coef
from .training import TrainConfig, evaluate, fit, tta_predict


class NotFittedError(ValueError, AttributeError):
    """Prediction requested before fit (sklearn-compatible exception shape)."""


def validate_image_batch(X) -> np.ndarray:
    """Check/coerce X into float32 [N, 3, H, W] with H, W divisible by 32."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(
            f"X must be [N, 3, H, W] (or a single [3, H, W] image), got "
            f"shape {arr.shape}")
    if arr.shape[2] % 32 or arr.shape[3] % 32:
        raise ValueError(
            f"image size {arr.shape[2]}x{arr.shape[3]} must be divisible by 32")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError("X must contain raw intensities in [0, 1]; "
                         "normalization happens inside the estimator")
    return arr


def validate_mask_batch(y, X: np.ndarray) -> np.ndarray:
    """Check/coerce y into float32 [N, 1, H, W] binary masks matching X."""
    arr = np.asarray(y, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape != (X.shape[0], 1, X.shape[2], X.shape[3]):
        raise ValueError(
            f"y shape {np.asarray(y).shape} does not match X "
            f"{X.shape[0]} masks of {X.shape[2]}x{X.shape[3]}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("y must be strictly binary (0/1)")
    return arr


class MedLiteNetSegmenter:
    """Binary lesion segmenter with a fit/predict interface.

    Parameters mirror the architectural and training knobs; defaults are the
    desk-scale micro configuration so ``fit`` on a handful of images finishes
    in seconds-to-minutes on a CPU.
    """

    def __init__(self, stage_widths=(8, 16, 24, 32), trans_dim=32,
                 trans_layers=1, trans_heads=4, decoder_widths=(16, 16, 8, 8),
                 aspp_branch_width=16, aspp_out_channels=32, expansion=6,
                 width_mult=1.0, epochs=20, batch_size=4, lr0=1e-3,
                 weight_decay=0.01, clip_norm=0.5, ema_decay=0.999,
                 accumulation=2, val_fraction=0.2, threshold=0.5,
                 use_augment=False, use_tta=False, seed=0):
        self.stage_widths = stage_widths
        self.trans_dim = trans_dim
        self.trans_layers = trans_layers
        self.trans_heads = trans_heads
        self.decoder_widths = decoder_widths
        self.aspp_branch_width = aspp_branch_width
        self.aspp_out_channels = aspp_out_channels
        self.expansion = expansion
        self.width_mult = width_mult
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.ema_decay = ema_decay
        self.accumulation = accumulation
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.use_augment = use_augment
        self.use_tta = use_tta
        self.seed = seed

    # -- sklearn plumbing ----------------------------------------------------
    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for MedLiteNetSegmenter")
            setattr(self, key, value)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this MedLiteNetSegmenter instance is not fitted yet; call "
                "'fit' first")

    # -- estimator API --------------------------------------------------------
    def fit(self, X, y):
        """Train on images X in [0, 1] ([N, 3, H, W]) and binary masks y."""
        X = validate_image_batch(X)
        y = validate_mask_batch(y, X)
        n = X.shape[0]
        samples = [SegmentationSample(image=X[i], mask=y[i], seed=i)
                   for i in range(n)]
        n_val = max(1, int(round(self.val_fraction * n))) if n > 1 else 0
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(n)
        val_idx = set(order[:n_val].tolist())
        train_samples = [samples[i] for i in range(n) if i not in val_idx]
        val_samples = [samples[i] for i in range(n) if i in val_idx]
        if not val_samples:
            val_samples = train_samples

        config = ModelConfig(
            input_size=X.shape[2] if X.shape[2] == X.shape[3] else 32 * 8,
            stage_widths=tuple(self.stage_widths),
            trans_dim=self.trans_dim, trans_layers=self.trans_layers,
            trans_heads=self.trans_heads,
            decoder_widths=tuple(self.decoder_widths),
            aspp_branch_width=self.aspp_branch_width,
            aspp_out_channels=self.aspp_out_channels,
            expansion=self.expansion, width_mult=self.width_mult)
        train_config = TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, lr0=self.lr0,
            weight_decay=self.weight_decay, clip_norm=self.clip_norm,
            ema_decay=self.ema_decay, accumulation=self.accumulation,
            seed=self.seed, augment=self.use_augment)

        self.model_ = MedLiteNet(config, seed=self.seed)
        result = fit(self.model_, train_samples, val_samples, train_config,
                     augment_config=AugmentConfig() if self.use_augment else None)
        self.history_ = result.history
        self.best_val_dice_ = result.best_val_dice
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Probability maps [N, 1, H, W] in (0, 1)."""
        self._check_fitted()
        X = validate_image_batch(X)
        from .data import normalize_imagenet

        self.model_.eval()
        batch = normalize_imagenet(X)
        if self.use_tta:
            return tta_predict(self.model_, batch)
        return self.model_(Tensor(batch)).data

    def predict(self, X) -> np.ndarray:
        """Binary masks [N, H, W] thresholded at ``self.threshold``."""
        proba = self.predict_proba(X)
        return predict_mask(proba, self.threshold)[:, 0]

    def score(self, X, y) -> float:
        """Mean Dice coefficient over the batch."""
        X = validate_image_batch(X)
        y = validate_mask_batch(y, X)
        masks = self.predict(X)
        return float(np.mean([dice_coef(masks[i], y[i, 0])
                              for i in range(X.shape[0])]))
