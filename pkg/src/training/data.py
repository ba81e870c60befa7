"""
Synthetic segmentation data and augmentation.

Each synthetic image holds one to three random ellipses on a dark background: every
ellipse raises the intensity by a random offset, then Gaussian noise (sigma 0.1) is added.
The mask is the union of ellipse interiors (or, with more than two classes, each ellipse
carries a label cycling through the foreground classes; later ellipses paint over earlier
ones).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DataError, DimensionError
from src.tensor.io import load_cft, save_cft
from src.training.schema import AugmentFlags

logger = logging.getLogger(__name__)

NOISE_SIGMA = 0.1
MAX_ELLIPSES = 3
MAX_REDRAWS = 100


@dataclass
class SegmentationDataset:
    """
    Aligned images and masks.

    Attributes:
        images (np.ndarray): [N, C, H, W] float32.
        masks (np.ndarray): [N, H, W] int64 class indices.
    """

    images: np.ndarray
    masks: np.ndarray

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.masks.ndim != 3:
            raise DimensionError(f"dataset expects [N,C,H,W] images and [N,H,W] masks, got {self.images.shape}, {self.masks.shape}")
        if self.images.shape[0] != self.masks.shape[0] or self.images.shape[2:] != self.masks.shape[1:]:
            raise DataError(f"images {self.images.shape} and masks {self.masks.shape} are not aligned")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.images[index], self.masks[index]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_size(self) -> Tuple[int, int]:
        return tuple(self.images.shape[2:])


def _draw_sample(size: int, rng: np.random.Generator, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    image = np.zeros((size, size), dtype=np.float64)
    mask = np.zeros((size, size), dtype=np.int64)
    for j in range(int(rng.integers(1, MAX_ELLIPSES + 1))):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        ry, rx = rng.uniform(0.08, 0.25, size=2) * size
        theta = rng.uniform(0.0, np.pi)
        offset = rng.uniform(0.5, 1.0)
        dy, dx = rows - cy, cols - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        image[inside] += offset
        mask[inside] = 1 + j % (num_classes - 1)
    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    return image.astype(np.float32), mask


def synth_dataset(n: int, size: int, seed: int, num_classes: int = 2) -> SegmentationDataset:
    """
    Deterministic synthetic dataset of `n` single-channel `size`x`size` images.

    Degenerate draws (empty or full masks) are regenerated.

    Raises:
        ConfigError: size not divisible by 16 or num_classes < 2.
    """
    if size <= 0 or size % 16:
        raise ConfigError(f"image size must be a positive multiple of 16, got {size}", key="image_size")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}", key="num_classes")
    rng = np.random.default_rng(seed)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    masks = np.empty((n, size, size), dtype=np.int64)
    for i in range(n):
        for _ in range(MAX_REDRAWS):
            image, mask = _draw_sample(size, rng, num_classes)
            foreground = int((mask > 0).sum())
            if 0 < foreground < mask.size:
                break
        else:
            raise DataError(f"could not draw a non-degenerate sample after {MAX_REDRAWS} attempts")
        images[i, 0], masks[i] = image, mask
    logger.debug(f"DATASET: {n} x {size}x{size} | SEED: {seed} | FG: {float((masks > 0).mean()):.3f}")
    return SegmentationDataset(images, masks)


def hflip(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array[..., ::-1])


def vflip(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array[..., ::-1, :])


def random_crop(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    crop_fraction: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Crop a random window and zero-pad it back, centered, to the original size."""
    height, width = mask.shape
    ch = max(1, int(round(height * crop_fraction)))
    cw = max(1, int(round(width * crop_fraction)))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    pad_top, pad_left = (height - ch) // 2, (width - cw) // 2
    out_image = np.zeros_like(image)
    out_mask = np.zeros_like(mask)
    out_image[..., pad_top : pad_top + ch, pad_left : pad_left + cw] = image[..., top : top + ch, left : left + cw]
    out_mask[pad_top : pad_top + ch, pad_left : pad_left + cw] = mask[top : top + ch, left : left + cw]
    return out_image, out_mask


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    flags: AugmentFlags,
    rng: np.random.Generator,
    crop_fraction: float = 0.875,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Apply the same random geometric transform to an image [C, H, W] and its mask [H, W].

    Raises:
        DataError: image and mask are not spatially aligned.
    """
    if image.shape[-2:] != mask.shape:
        raise DataError(f"image {image.shape} and mask {mask.shape} are not aligned")
    if flags.flip:
        if rng.random() < 0.5:
            image, mask = hflip(image), hflip(mask)
        if rng.random() < 0.5:
            image, mask = vflip(image), vflip(mask)
    if flags.crop:
        image, mask = random_crop(image, mask, rng, crop_fraction)
    return image.copy(), mask.copy()


def sample_batch(
    dataset: SegmentationDataset,
    batch_size: int,
    rng: np.random.Generator,
    flags: Optional[AugmentFlags] = None,
    crop_fraction: float = 0.875,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw `batch_size` indices with replacement and augment each pair."""
    flags = flags or AugmentFlags(flip=False, crop=False)
    indices = rng.integers(0, len(dataset), size=batch_size)
    pairs = [augment(dataset.images[i], dataset.masks[i], flags, rng, crop_fraction) for i in indices]
    images = np.stack([p[0] for p in pairs]).astype(np.float32)
    masks = np.stack([p[1] for p in pairs]).astype(np.int64)
    return images, masks


def save_dataset(directory: str, dataset: SegmentationDataset) -> str:
    os.makedirs(directory, exist_ok=True)
    save_cft(os.path.join(directory, "images.cft"), dataset.images)
    save_cft(os.path.join(directory, "masks.cft"), dataset.masks.astype(np.float32))
    logger.info(f"DATASET SAVED: {directory} | SAMPLES: {len(dataset)}")
    return directory


def load_dataset(directory: str) -> SegmentationDataset:
    """
    Raises:
        DataError: Missing files, or images and masks disagree.
    """
    images_path = os.path.join(directory, "images.cft")
    masks_path = os.path.join(directory, "masks.cft")
    if not (os.path.exists(images_path) and os.path.exists(masks_path)):
        raise DataError(f"{directory}: expected images.cft and masks.cft")
    images = load_cft(images_path)
    masks = np.rint(load_cft(masks_path)).astype(np.int64)
    return SegmentationDataset(images, masks)


def dataset_exists(directory: Optional[str]) -> bool:
    return bool(directory) and os.path.exists(os.path.join(directory, "images.cft"))
