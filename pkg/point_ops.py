"""
Point cloud primitives: FPS, ball query, gather, feature propagation and
BEV voxelization with per-pixel max pooling.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from tensor_core import GradCase, Tensor, as_tensor, custom_op, index_rows, reduce_sum, reshape

logger = logging.getLogger(__name__)

EXACT_MATCH_EPS = 1e-8


class PointCloudError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    feats: np.ndarray | Tensor | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.coords)):
            raise PointCloudError("point coordinates must be finite")
        if self.feats is not None:
            if not isinstance(self.feats, Tensor):
                self.feats = np.asarray(self.feats, dtype=np.float64)
                if self.feats.ndim == 1:
                    self.feats = self.feats.reshape(-1, 1)
            if self.feats.shape[0] != self.coords.shape[0]:
                raise PointCloudError(
                    f"{self.feats.shape[0]} feature rows for {self.coords.shape[0]} points")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        feats = None
        if self.feats is not None:
            feats = index_rows(self.feats, indices) if isinstance(self.feats, Tensor) else self.feats[indices]
        return PointCloud(self.coords[indices], feats)


@dataclass
class NeighborIndex:
    indices: np.ndarray   # [M, max_neighbors], padded with the first neighbour
    counts: np.ndarray    # [M]


@dataclass(frozen=True)
class BevGrid:
    x_range: tuple = (-4.8, 4.8)
    y_range: tuple = (-4.8, 4.8)
    z_range: tuple = (-2.0, 2.0)
    pixel_size: float = 0.3
    nx: int = field(init=False)
    ny: int = field(init=False)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            low, high = getattr(self, name)
            if not high > low:
                raise PointCloudError(f"{name} {getattr(self, name)} is empty")
            object.__setattr__(self, name, (float(low), float(high)))
        if self.pixel_size <= 0:
            raise PointCloudError("pixel_size must be positive")
        nx = int(round((self.x_range[1] - self.x_range[0]) / self.pixel_size))
        ny = int(round((self.y_range[1] - self.y_range[0]) / self.pixel_size))
        if nx < 1 or ny < 1:
            raise PointCloudError("grid must hold at least one pixel")
        object.__setattr__(self, "nx", nx)
        object.__setattr__(self, "ny", ny)

    @classmethod
    def desk(cls) -> "BevGrid":
        return cls((-1.2, 1.2), (-1.2, 1.2), (-2.0, 2.0), 0.3)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "z_range": list(self.z_range), "pixel_size": self.pixel_size}

    def contains_xy(self, x, y) -> np.ndarray:
        x, y = np.asarray(x), np.asarray(y)
        return ((x >= self.x_range[0]) & (x < self.x_range[1])
                & (y >= self.y_range[0]) & (y < self.y_range[1]))

    def pixel_of(self, x, y) -> tuple:
        """(row, col) of the pixel holding (x, y); rows follow y, columns follow x."""
        col = np.clip(np.floor((np.asarray(x) - self.x_range[0]) / self.pixel_size), 0, self.nx - 1)
        row = np.clip(np.floor((np.asarray(y) - self.y_range[0]) / self.pixel_size), 0, self.ny - 1)
        return row.astype(np.int64), col.astype(np.int64)

    def pixel_center(self, row, col) -> tuple:
        x = self.x_range[0] + (np.asarray(col) + 0.5) * self.pixel_size
        y = self.y_range[0] + (np.asarray(row) + 0.5) * self.pixel_size
        return x, y

    def pixel_centers(self) -> tuple:
        rows, cols = np.meshgrid(np.arange(self.ny), np.arange(self.nx), indexing="ij")
        return self.pixel_center(rows, cols)


def farthest_point_sample(cloud: PointCloud, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection. Ties go to the lowest index."""
    coords = cloud.coords
    n = coords.shape[0]
    if k > n:
        raise PointCloudError(f"cannot sample {k} of {n} points")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if not 0 <= start < n:
        raise PointCloudError(f"start index {start} out of range for {n} points")

    selected = np.empty(k, dtype=np.int64)
    min_dist = np.full(n, np.inf)
    current = start
    for i in range(k):
        selected[i] = current
        dist = np.sum((coords - coords[current]) ** 2, axis=1)
        min_dist = np.minimum(min_dist, dist)
        min_dist[selected[:i + 1]] = -np.inf
        current = int(np.argmax(min_dist))
    return selected


def ball_query(sources: PointCloud, queries: PointCloud, radius: float, max_neighbors: int) -> NeighborIndex:
    """Nearest-first neighbours within `radius`; an empty ball falls back to the nearest source."""
    if len(sources) == 0:
        raise PointCloudError("ball query over an empty source cloud")
    if radius <= 0:
        raise PointCloudError("radius must be positive")
    dist = cdist(queries.coords, sources.coords)
    k = min(max_neighbors, len(sources))
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    within = np.take_along_axis(dist, order, axis=1) <= radius
    counts = within.sum(axis=1)
    padded = np.where(within, order, order[:, :1])
    counts = np.maximum(counts, 1)
    if k < max_neighbors:
        padded = np.concatenate([padded, np.repeat(padded[:, :1], max_neighbors - k, axis=1)], axis=1)
    return NeighborIndex(indices=padded.astype(np.int64), counts=counts.astype(np.int64))


def gather(feats, indices) -> Tensor:
    feats = as_tensor(feats)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= feats.shape[0]):
        raise PointCloudError(f"gather index out of range for {feats.shape[0]} rows")
    return index_rows(feats, indices)


def interpolation_weights(src_coords: np.ndarray, dst_coords: np.ndarray, k: int = 3) -> tuple:
    """Inverse-square-distance weights over the k nearest sources: (weights [M,k], indices [M,k])."""
    src_coords = np.asarray(src_coords, dtype=np.float64).reshape(-1, 3)
    dst_coords = np.asarray(dst_coords, dtype=np.float64).reshape(-1, 3)
    if src_coords.shape[0] == 0:
        raise PointCloudError("feature propagation needs a nonempty source cloud")
    k = min(k, src_coords.shape[0])
    dist = cdist(dst_coords, src_coords)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    nearest = np.take_along_axis(dist, order, axis=1)

    exact = nearest[:, 0] < EXACT_MATCH_EPS
    safe = np.where(exact[:, None], 1.0, nearest)
    weights = 1.0 / safe ** 2
    weights = weights / weights.sum(axis=1, keepdims=True)
    one_hot = np.zeros_like(weights)
    one_hot[:, 0] = 1.0
    weights = np.where(exact[:, None], one_hot, weights)
    return weights, order


def feature_propagation(src: PointCloud, dst_coords: np.ndarray) -> Tensor:
    if src.feats is None:
        raise PointCloudError("feature propagation needs source features")
    weights, order = interpolation_weights(src.coords, dst_coords)
    m, k = order.shape
    feats = as_tensor(src.feats)
    picked = reshape(index_rows(feats, order.reshape(-1)), (m, k, feats.shape[1]))
    return reduce_sum(picked * weights[:, :, None], axis=1)


def voxelize_bev(cloud: PointCloud, grid: BevGrid) -> tuple:
    """Max-pool point features into a [D, ny, nx] BEV map plus a boolean occupancy mask.

    The whole z-range collapses into one layer. The gradient of each pixel
    channel goes to the first point attaining the max.
    """
    if cloud.feats is None:
        raise PointCloudError("voxelization needs point features")
    feats = as_tensor(cloud.feats)
    n, d = feats.shape
    x, y, z = cloud.coords[:, 0], cloud.coords[:, 1], cloud.coords[:, 2]
    keep = np.flatnonzero(grid.contains_xy(x, y) & (z >= grid.z_range[0]) & (z <= grid.z_range[1]))
    rows, cols = grid.pixel_of(x[keep], y[keep])
    flat = rows * grid.nx + cols
    n_pix = grid.nx * grid.ny

    pooled = np.full((n_pix, d), -np.inf)
    np.maximum.at(pooled, flat, feats.data[keep])
    occupied = np.zeros(n_pix, dtype=bool)
    occupied[flat] = True

    is_max = feats.data[keep] == pooled[flat]
    winner = np.full((n_pix, d), n, dtype=np.int64)
    np.minimum.at(winner, flat, np.where(is_max, keep[:, None], n))
    pooled[~occupied] = 0.0

    out = pooled.T.reshape(d, grid.ny, grid.nx)
    mask = occupied.reshape(grid.ny, grid.nx)
    occ_pix = np.flatnonzero(occupied)

    def backward_fn(g):
        grad = np.zeros((n, d))
        g_pix = g.reshape(d, n_pix).T
        channels = np.tile(np.arange(d), occ_pix.size)
        np.add.at(grad, (winner[occ_pix].reshape(-1), channels), g_pix[occ_pix].reshape(-1))
        return (grad,)

    return custom_op(out, (feats,), backward_fn, "voxelize_bev"), mask


def point_grad_cases(rng: np.random.Generator) -> list:
    """Gradient cases for the differentiable point ops, with respect to point features."""
    src = rng.uniform(-1.0, 1.0, size=(6, 3))
    dst = rng.uniform(-1.0, 1.0, size=(5, 3))
    dst[0] = src[2]
    grid = BevGrid((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), 0.5)
    vox_coords = rng.uniform(-1.2, 1.2, size=(12, 3))
    w_gather = rng.normal(size=(4, 3))
    w_fp = rng.normal(size=(5, 3))
    w_vox = rng.normal(size=(3, grid.ny, grid.nx))
    feats = lambda r: r.normal(size=(6, 3))
    return [
        GradCase("gather", feats, lambda x: reduce_sum(gather(x, [1, 4, 4, 0]) * w_gather)),
        GradCase("feature_propagation", feats,
                 lambda x: reduce_sum(feature_propagation(PointCloud(src, x), dst) * w_fp)),
        GradCase("voxelize_bev", lambda r: r.normal(size=(12, 3)),
                 lambda x: reduce_sum(voxelize_bev(PointCloud(vox_coords, x), grid)[0] * w_vox)),
    ]
