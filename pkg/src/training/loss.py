"""
Segmentation losses: pixelwise cross-entropy, soft Dice, and their equal-weight mean.
"""

from __future__ import annotations

from typing import Union

import numpy as np

from src.errors import DataError, DimensionError
from src.model.convformer import SegLogits
from src.tensor import functional as F
from src.tensor.tensor import Tensor

DICE_SMOOTH = 1.0


def _logits_tensor(logits: Union[SegLogits, Tensor]) -> Tensor:
    tensor = logits.logits if isinstance(logits, SegLogits) else logits
    if tensor.ndim != 4:
        raise DimensionError(f"logits must be [B, K, H, W], got {tensor.shape}")
    return tensor


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[B, H, W] class indices -> [B, K, H, W] indicator.

    Raises:
        DataError: Index outside [0, num_classes).
    """
    target = np.asarray(target)
    if target.ndim != 3:
        raise DimensionError(f"target must be [B, H, W], got {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise DataError(f"target classes must lie in [0, {num_classes}), got [{target.min()}, {target.max()}]")
    encoded = np.eye(num_classes, dtype=dtype)[target.astype(np.int64)]
    return np.ascontiguousarray(encoded.transpose(0, 3, 1, 2))


def cross_entropy_loss(logits: Union[SegLogits, Tensor], target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]."""
    tensor = _logits_tensor(logits)
    _check_target(tensor, target)
    encoded = Tensor(one_hot(target, tensor.shape[1]), dtype=tensor.dtype)
    return -(F.log_softmax(tensor, axis=1) * encoded).sum(axis=1).mean()


def soft_dice_loss(logits: Union[SegLogits, Tensor], target: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """
    1 - mean over classes of (2 * sum(p * y) + s) / (sum(p) + sum(y) + s).

    Sums run over the batch and both spatial axes; p are softmax probabilities.
    """
    tensor = _logits_tensor(logits)
    _check_target(tensor, target)
    encoded = Tensor(one_hot(target, tensor.shape[1]), dtype=tensor.dtype)
    probs = F.softmax(tensor, axis=1)
    axes = (0, 2, 3)
    intersection = (probs * encoded).sum(axis=axes)
    denominator = probs.sum(axis=axes) + encoded.sum(axis=axes)
    dice = (intersection * 2.0 + smooth) / (denominator + smooth)
    return 1.0 - dice.mean()


def dice_ce_loss(logits: Union[SegLogits, Tensor], target: np.ndarray) -> Tensor:
    """
    Mean of the soft-Dice loss and the pixelwise cross-entropy.

    Raises:
        DataError: Target class outside [0, num_classes).
        DimensionError: Target shape does not match the logits.
    """
    return (soft_dice_loss(logits, target) + cross_entropy_loss(logits, target)) * 0.5


def _check_target(logits: Tensor, target: np.ndarray) -> None:
    target = np.asarray(target)
    expected = (logits.shape[0],) + tuple(logits.shape[2:])
    if target.shape != expected:
        raise DimensionError(f"target shape {target.shape} does not match logits {logits.shape}")
