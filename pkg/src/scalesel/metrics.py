"""Correspondence quality metrics: PCK, mask label-transfer accuracy, IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .hough import DenseFlow
from .pyramid import KeypointSet


@dataclass(frozen=True)
class PckResult:
    correct: int
    total: int
    pck: float
    threshold_px: float
    alpha: float


@dataclass(frozen=True)
class MaskMetrics:
    lt_acc: float
    iou: float


def pck(
    predicted: KeypointSet,
    ground_truth: KeypointSet,
    bbox: tuple[float, float, float, float],
    alpha: float,
) -> PckResult:
    """Percentage of correct keypoints at threshold alpha * max(bbox_h, bbox_w).

    The comparison is inclusive: an error exactly at the threshold counts as
    correct.
    """
    if len(predicted) != len(ground_truth):
        raise ValidationError(
            f"keypoint cardinality mismatch: {len(predicted)} vs {len(ground_truth)}"
        )
    if len(predicted) == 0:
        raise ValidationError("PCK is undefined for empty keypoint sets")
    x0, y0, x1, y1 = bbox
    threshold = alpha * max(x1 - x0, y1 - y0)
    err = np.linalg.norm(predicted.points - ground_truth.points, axis=1)
    correct = int((err <= threshold).sum())
    total = len(predicted)
    return PckResult(correct, total, correct / total, float(threshold), float(alpha))


def warp_mask(flow: DenseFlow, src_mask: np.ndarray) -> np.ndarray:
    """Displace every masked source pixel by its feature cell's flow.

    The displaced location is rounded half-up to the nearest pixel; pixels
    leaving the image are dropped.
    """
    mask = np.asarray(src_mask).astype(bool)
    h, w = mask.shape
    g = flow.grid
    if abs(g.image_h - h) > 0.5 or abs(g.image_w - w) > 0.5:
        raise ShapeError(
            f"mask {h}x{w} does not match the flow grid's {g.image_h:.1f}x{g.image_w:.1f} image"
        )
    out = np.zeros_like(mask)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return out
    cell_x = np.minimum((xs / g.stride).astype(np.int64), g.w - 1)
    cell_y = np.minimum((ys / g.stride).astype(np.int64), g.h - 1)
    p = cell_y * g.w + cell_x
    nx = np.floor(xs + flow.flow[p, 0] + 0.5).astype(np.int64)
    ny = np.floor(ys + flow.flow[p, 1] + 0.5).astype(np.int64)
    keep = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
    out[ny[keep], nx[keep]] = True
    return out


def mask_metrics(warped: np.ndarray, target_gt: np.ndarray) -> MaskMetrics:
    """Label-transfer accuracy and IoU; IoU of two empty masks is 1.0."""
    a = np.asarray(warped).astype(bool)
    b = np.asarray(target_gt).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    lt_acc = float((a == b).mean())
    union = int((a | b).sum())
    iou = 1.0 if union == 0 else float((a & b).sum() / union)
    return MaskMetrics(lt_acc, iou)
