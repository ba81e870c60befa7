"""
Segmentation metrics.

Overlap scores come from pixel counts (TP / FP / FN / TN). Boundary scores measure
nearest-boundary Euclidean distances through distance transforms: a boundary pixel is a
foreground pixel 4-adjacent to background (pixels outside the image count as background).

Zero-denominator conventions for the overlap scores: both masks empty gives 1, exactly
one empty gives 0. Specificity with no negative pixels in the reference is 1.
"""

from __future__ import annotations

import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from src.errors import DimensionError, EmptyMaskError

logger = logging.getLogger(__name__)

Spacing = Union[float, Tuple[float, float]]

OVERLAP_METRICS = ("iou", "dice", "precision", "recall", "f1", "sensitivity", "specificity")
BOUNDARY_METRICS = ("hausdorff", "adb")
ALL_METRICS = OVERLAP_METRICS + BOUNDARY_METRICS


class OverlapScores(NamedTuple):
    iou: float
    dice: float
    precision: float
    recall: float
    f1: float
    sensitivity: float
    specificity: float


class BoundaryScores(NamedTuple):
    hausdorff: float
    adb: float


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def _ratio(numerator: int, denominator: int, both_empty: bool) -> float:
    if denominator == 0:
        return 1.0 if both_empty else 0.0
    return numerator / denominator


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> OverlapScores:
    """
    IoU, Dice, precision, recall, F1, sensitivity and specificity of a binary prediction.

    Raises:
        DimensionError: Shape mismatch.
    """
    pred, gt = _check_pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    both_empty = tp + fp + fn == 0
    iou = _ratio(tp, tp + fp + fn, both_empty)
    dice = _ratio(2 * tp, 2 * tp + fp + fn, both_empty)
    precision = _ratio(tp, tp + fp, both_empty)
    recall = _ratio(tp, tp + fn, both_empty)
    specificity = tn / (tn + fp) if tn + fp else 1.0
    return OverlapScores(iou, dice, precision, recall, dice, recall, specificity)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background."""
    mask = np.asarray(mask).astype(bool)
    footprint = generate_binary_structure(mask.ndim, 1)
    return mask & ~binary_erosion(mask, structure=footprint, iterations=1, border_value=0)


def boundary_distances(pred: np.ndarray, gt: np.ndarray, spacing: Spacing = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-boundary distances in both directions.

    Returns:
        (pred -> gt distances for each pred boundary pixel, gt -> pred distances).

    Raises:
        EmptyMaskError: Either mask is empty.
    """
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise EmptyMaskError("boundary metrics need two nonempty masks")
    pred_border, gt_border = boundary(pred), boundary(gt)
    to_gt = distance_transform_edt(~gt_border, sampling=spacing)
    to_pred = distance_transform_edt(~pred_border, sampling=spacing)
    return to_gt[pred_border], to_pred[gt_border]


def boundary_metrics(pred: np.ndarray, gt: np.ndarray, spacing: Spacing = 1.0) -> BoundaryScores:
    """
    Hausdorff distance and average symmetric boundary distance.

    Raises:
        EmptyMaskError: Either mask is empty (the pair is excluded from reports).
    """
    pred_to_gt, gt_to_pred = boundary_distances(pred, gt, spacing)
    hausdorff = float(max(pred_to_gt.max(), gt_to_pred.max()))
    adb = float(np.concatenate([pred_to_gt, gt_to_pred]).mean())
    return BoundaryScores(hausdorff, adb)


class ImageMetrics(BaseModel):
    """Scores of one image for one foreground class (one-vs-rest)."""

    image: int
    class_index: int = 1
    iou: float
    dice: float
    precision: float
    recall: float
    f1: float
    sensitivity: float
    specificity: float
    hausdorff: Optional[float] = None
    adb: Optional[float] = None
    excluded: bool = False

    @field_validator(*OVERLAP_METRICS)
    @classmethod
    def _check_unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"overlap metric outside [0, 1]: {value}")
        return value


class MetricsReport(BaseModel):
    """
    Per-image scores and their means.

    Attributes:
        num_classes (int): Classes including background.
        per_image (List[ImageMetrics]): One record per (image, foreground class).
        mean (Dict[str, Optional[float]]): Mean of every metric; boundary means skip excluded
            records and are None when every record was excluded.
        excluded (int): Records excluded from the boundary metrics (an empty mask).
    """

    num_classes: int = 2
    spacing: Tuple[float, float] = (1.0, 1.0)
    per_image: List[ImageMetrics] = Field(default_factory=list)
    mean: Dict[str, Optional[float]] = Field(default_factory=dict)
    excluded: int = 0

    @property
    def num_images(self) -> int:
        return len({record.image for record in self.per_image})

    def class_means(self) -> Dict[int, Dict[str, Optional[float]]]:
        """Means per foreground class."""
        classes = sorted({record.class_index for record in self.per_image})
        return {c: _means([r for r in self.per_image if r.class_index == c]) for c in classes}

    def image_scores(self, metric: str) -> List[float]:
        """Per-image score of `metric` averaged over foreground classes, in image order."""
        if metric not in ALL_METRICS:
            raise KeyError(f"unknown metric '{metric}'")
        scores: Dict[int, List[float]] = {}
        for record in self.per_image:
            value = getattr(record, metric)
            if value is not None:
                scores.setdefault(record.image, []).append(value)
        return [float(np.mean(scores[i])) for i in sorted(scores)]


def _means(records: Sequence[ImageMetrics]) -> Dict[str, Optional[float]]:
    out: Dict[str, Optional[float]] = {}
    for metric in ALL_METRICS:
        values = [getattr(r, metric) for r in records if getattr(r, metric) is not None]
        out[metric] = float(np.mean(values)) if values else None
    return out


def build_metrics_report(
    preds: np.ndarray,
    gts: np.ndarray,
    num_classes: int = 2,
    spacing: Spacing = 1.0,
) -> MetricsReport:
    """
    Score predicted class maps [N, H, W] against references, one-vs-rest per foreground class.

    Raises:
        DimensionError: Shape mismatch.
    """
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.shape != gts.shape or preds.ndim != 3:
        raise DimensionError(f"expected matching [N, H, W] label maps, got {preds.shape} and {gts.shape}")
    records: List[ImageMetrics] = []
    excluded = 0
    for i in range(preds.shape[0]):
        for c in range(1, num_classes):
            pred, gt = preds[i] == c, gts[i] == c
            scores = overlap_metrics(pred, gt)._asdict()
            try:
                scores.update(boundary_metrics(pred, gt, spacing)._asdict())
                records.append(ImageMetrics(image=i, class_index=c, **scores))
            except EmptyMaskError:
                excluded += 1
                records.append(ImageMetrics(image=i, class_index=c, excluded=True, **scores))
    if excluded:
        logger.debug(f"METRICS: {excluded} record(s) excluded from boundary metrics")
    pair = (float(spacing), float(spacing)) if np.isscalar(spacing) else tuple(float(s) for s in spacing)
    return MetricsReport(
        num_classes=num_classes,
        spacing=pair,
        per_image=records,
        mean=_means(records),
        excluded=excluded,
    )
