"""
BEV training targets and the weighted loss:
    total = l_seg * seg + l_center * focal + l_offset * offset + l_z * zaxis
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from geometry import Box3D, points_in_box, rotation_z
from point_ops import BevGrid, PointCloud
from tensor_core import Tensor, absolute, as_tensor, clip, getitem, log, power, reduce_mean, reduce_sum, sub

logger = logging.getLogger(__name__)


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_seg: float = 1.0
    lambda_center: float = 1.0
    lambda_offset: float = 1.0
    lambda_z: float = 2.0
    alpha: float = 2.0
    beta: float = 4.0
    radius: int = 2
    eps_clip: float = 1e-6

    def __post_init__(self):
        if min(self.lambda_seg, self.lambda_center, self.lambda_offset, self.lambda_z) < 0:
            raise LossError("loss weights must be nonnegative")
        if self.alpha <= 0 or self.beta <= 0:
            raise LossError("alpha and beta must be positive")
        if self.radius < 0:
            raise LossError("window radius must be nonnegative")


@dataclass
class BevTargets:
    heatmap: np.ndarray        # [ny, nx]
    center_pixel: tuple        # (row, col) of the pixel holding the center
    center: np.ndarray         # continuous (x, y) in meters
    yaw: float
    z: float
    seg_labels: np.ndarray     # [N] bool

    def window(self, grid: BevGrid, radius: int) -> tuple:
        """Pixels of the (2r+1)^2 window clamped to the grid, with [dx, dy, yaw] targets [3, K]."""
        row0, col0 = self.center_pixel
        offsets = np.arange(-radius, radius + 1)
        rows = (row0 + offsets)[:, None].repeat(offsets.size, axis=1).reshape(-1)
        cols = (col0 + offsets)[None, :].repeat(offsets.size, axis=0).reshape(-1)
        keep = (rows >= 0) & (rows < grid.ny) & (cols >= 0) & (cols < grid.nx)
        rows, cols = rows[keep], cols[keep]
        px, py = grid.pixel_center(rows, cols)
        target = np.vstack([self.center[0] - px, self.center[1] - py, np.full(rows.size, self.yaw)])
        return rows, cols, target


@dataclass
class LossBreakdown:
    seg: float
    center: float
    offset: float
    zaxis: float
    total: float

    def as_row(self) -> list:
        return [self.seg, self.center, self.offset, self.zaxis, self.total]


def footprint_mask(box: Box3D, grid: BevGrid) -> np.ndarray:
    """Pixels whose centers lie inside the yaw-rotated BEV footprint of `box`."""
    xs, ys = grid.pixel_centers()
    rel = np.stack([xs - box.center[0], ys - box.center[1], np.zeros_like(xs)], axis=-1) @ rotation_z(box.yaw)
    return (np.abs(rel[..., 0]) <= box.size[0] / 2 + 1e-9) & (np.abs(rel[..., 1]) <= box.size[1] / 2 + 1e-9)


def make_bev_targets(gt: Box3D, grid: BevGrid, search_cloud: PointCloud) -> BevTargets:
    """Heatmap 1 at the center pixel, 1/(1+d) elsewhere inside the footprint, 0 outside.

    d is measured in pixels between pixel indices.
    """
    cx, cy = gt.center[0], gt.center[1]
    if not bool(grid.contains_xy(cx, cy)):
        raise LossError(f"box center ({cx:.3f}, {cy:.3f}) lies outside the BEV grid")
    row0, col0 = (int(v) for v in grid.pixel_of(cx, cy))
    rows, cols = np.meshgrid(np.arange(grid.ny), np.arange(grid.nx), indexing="ij")
    dist = np.sqrt((rows - row0) ** 2 + (cols - col0) ** 2)
    heatmap = np.where(footprint_mask(gt, grid), 1.0 / (1.0 + dist), 0.0)
    heatmap[row0, col0] = 1.0
    return BevTargets(heatmap=heatmap, center_pixel=(row0, col0), center=np.array([cx, cy]),
                      yaw=float(gt.yaw), z=float(gt.center[2]),
                      seg_labels=points_in_box(search_cloud.coords, gt))


def focal_loss(pred: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0,
               eps_clip: float = 1e-6) -> Tensor:
    """Penalty-reduced pixel focal loss, summed over pixels without normalization."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LossError(f"heatmap {pred.shape} vs target {target.shape}")
    p = clip(pred, eps_clip, 1.0 - eps_clip)
    q = sub(1.0, p)
    positive = (target == 1.0).astype(np.float64)
    negative_weight = (1.0 - positive) * (1.0 - target) ** beta
    pos_term = power(q, alpha) * log(p) * positive
    neg_term = power(p, alpha) * log(q) * negative_weight
    return -reduce_sum(pos_term + neg_term)


def offset_loss(offset_rot: Tensor, targets: BevTargets, radius: int, grid: BevGrid) -> Tensor:
    """L1 between [dx, dy, yaw] predictions and targets over the window around the center pixel."""
    rows, cols, target = targets.window(grid, radius)
    picked = getitem(offset_rot, (slice(None), rows, cols))
    return reduce_sum(absolute(picked - target))


def zaxis_loss(zmap: Tensor, center_pixel: tuple, z_gt: float) -> Tensor:
    row, col = center_pixel
    return reduce_sum(absolute(getitem(zmap, (row, col)) - z_gt))


def seg_loss(scores: Tensor, labels: np.ndarray, eps_clip: float = 1e-6) -> Tensor:
    """Mean binary cross entropy."""
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise LossError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    s = clip(scores, eps_clip, 1.0 - eps_clip)
    return -reduce_mean(log(s) * labels + log(sub(1.0, s)) * (1.0 - labels))


def _value(component) -> float:
    return component.item() if isinstance(component, Tensor) else float(component)


def total_loss(seg, center, offset, zaxis, cfg: LossConfig):
    parts = {"seg": seg, "center": center, "offset": offset, "zaxis": zaxis}
    for name, component in parts.items():
        if not math.isfinite(_value(component)):
            raise LossError(f"non-finite {name} loss: {_value(component)}")
    return (seg * cfg.lambda_seg + center * cfg.lambda_center
            + offset * cfg.lambda_offset + zaxis * cfg.lambda_z)


def compute_losses(head, targets: BevTargets, cfg: LossConfig, grid: BevGrid) -> tuple:
    """Total loss tensor plus a float breakdown for logging."""
    center = focal_loss(head.heatmap, targets.heatmap, cfg.alpha, cfg.beta, cfg.eps_clip)
    offset = offset_loss(head.offset_rot, targets, cfg.radius, grid)
    zaxis = zaxis_loss(head.zmap, targets.center_pixel, targets.z)
    seg = Tensor(0.0) if head.seg_scores is None else seg_loss(head.seg_scores, targets.seg_labels, cfg.eps_clip)
    total = total_loss(seg, center, offset, zaxis, cfg)
    breakdown = LossBreakdown(_value(seg), _value(center), _value(offset), _value(zaxis), _value(total))
    return total, breakdown
