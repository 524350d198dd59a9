"""
Oriented 3D box math: membership, rotated IoU, canonical-frame transforms.

Boxes are (center, size=(l, w, h), yaw about +z). l runs along the box's
local x axis, w along local y.
"""

import math
from dataclasses import dataclass

import numpy as np

from point_ops import PointCloud

BOUNDARY_EPS = 1e-9


class GeometryError(ValueError):
    pass


def normalize_angle(angle):
    """Wrap into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    return float(wrapped) if wrapped.ndim == 0 else wrapped


@dataclass
class Box3D:
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(self.size > 0):
            raise GeometryError(f"box sizes must be positive, got {self.size.tolist()}")
        self.yaw = normalize_angle(self.yaw)

    @classmethod
    def from_array(cls, values) -> "Box3D":
        values = list(values)
        if len(values) != 7:
            raise GeometryError(f"box needs 7 values [x,y,z,l,w,h,yaw], got {len(values)}")
        return cls(values[0:3], values[3:6], values[6])

    def to_array(self) -> list:
        return [*map(float, self.center), *map(float, self.size), float(self.yaw)]

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def copy(self) -> "Box3D":
        return Box3D(self.center.copy(), self.size.copy(), self.yaw)

    def enlarged(self, margin_xy: float, z_range: tuple | None = None) -> "Box3D":
        """Grow l and w by 2*margin; optionally replace the vertical extent by an absolute z-range."""
        size = self.size + np.array([2.0 * margin_xy, 2.0 * margin_xy, 0.0])
        center = self.center.copy()
        if z_range is not None:
            center[2] = self.center[2] + 0.5 * (z_range[0] + z_range[1])
            size[2] = z_range[1] - z_range[0]
        return Box3D(center, size, self.yaw)


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rigid_transform_points(points: np.ndarray, yaw: float, translation) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ rotation_z(yaw).T + np.asarray(translation, dtype=np.float64)


def rigid_transform_box(box: Box3D, yaw: float, translation) -> Box3D:
    center = rigid_transform_points(box.center[None, :], yaw, translation)[0]
    return Box3D(center, box.size.copy(), box.yaw + yaw)


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boundary-inclusive membership for an [N, 3] array."""
    local = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - box.center) @ rotation_z(box.yaw)
    half = box.size / 2.0 + BOUNDARY_EPS
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(p, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(p, dtype=np.float64)[None, :], box)[0])


def box_corners(box: Box3D) -> np.ndarray:
    """8x3 corners: bottom face counter-clockwise from (+l/2, +w/2), then the top face in the same order."""
    l, w, h = box.size / 2.0
    footprint = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
    local = np.vstack([np.column_stack([footprint, np.full(4, -h)]),
                       np.column_stack([footprint, np.full(4, h)])])
    return local @ rotation_z(box.yaw).T + box.center


def bev_polygon(box: Box3D) -> np.ndarray:
    return box_corners(box)[:4, :2]


def polygon_area(poly) -> float:
    """Shoelace area of a simple polygon."""
    if poly is None or len(poly) < 3:
        return 0.0
    poly = np.asarray(poly)
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def polygon_clip(subject, clip_poly, eps: float = 1e-12) -> list:
    """Sutherland-Hodgman clip of `subject` by the convex counter-clockwise `clip_poly`."""

    def inside(p, a, b):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -eps

    def intersection(s, e, a, b):
        dc = (a[0] - b[0], a[1] - b[1])
        dp = (s[0] - e[0], s[1] - e[1])
        n1 = a[0] * b[1] - a[1] * b[0]
        n2 = s[0] * e[1] - s[1] * e[0]
        denom = dc[0] * dp[1] - dc[1] * dp[0]
        if abs(denom) < 1e-15:
            return e
        return ((n1 * dp[0] - n2 * dc[0]) / denom, (n1 * dp[1] - n2 * dc[1]) / denom)

    output = [tuple(p) for p in subject]
    a = tuple(clip_poly[-1])
    for vertex in clip_poly:
        b = tuple(vertex)
        candidates, output = output, []
        if not candidates:
            break
        s = candidates[-1]
        for e in candidates:
            if inside(e, a, b):
                if not inside(s, a, b):
                    output.append(intersection(s, e, a, b))
                output.append(e)
            elif inside(s, a, b):
                output.append(intersection(s, e, a, b))
            s = e
        a = b
    return output


def _z_bounds(box: Box3D) -> tuple:
    return box.center[2] - box.size[2] / 2.0, box.center[2] + box.size[2] / 2.0


def box_iou_bev(a: Box3D, b: Box3D) -> float:
    poly_a, poly_b = bev_polygon(a), bev_polygon(b)
    inter = polygon_area(polygon_clip(poly_a, poly_b))
    union = polygon_area(poly_a) + polygon_area(poly_b) - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def box_iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated BEV intersection times z-overlap over the union volume."""
    bottom_a, top_a = _z_bounds(a)
    bottom_b, top_b = _z_bounds(b)
    z_overlap = min(top_a, top_b) - max(bottom_a, bottom_b)
    if z_overlap <= 0:
        return 0.0
    poly_a, poly_b = bev_polygon(a), bev_polygon(b)
    inter = polygon_area(polygon_clip(poly_a, poly_b)) * z_overlap
    vol_a = polygon_area(poly_a) * (top_a - bottom_a)
    vol_b = polygon_area(poly_b) * (top_b - bottom_b)
    union = vol_a + vol_b - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def center_distance(a: Box3D, b: Box3D) -> float:
    return float(np.linalg.norm(a.center - b.center))


def to_canonical_points(points: np.ndarray, ref: Box3D) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64).reshape(-1, 3) - ref.center) @ rotation_z(ref.yaw)


def from_canonical_points(points: np.ndarray, ref: Box3D) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ rotation_z(ref.yaw).T + ref.center


def to_canonical(cloud: PointCloud, ref: Box3D) -> PointCloud:
    return PointCloud(to_canonical_points(cloud.coords, ref), cloud.feats)


def from_canonical(cloud: PointCloud, ref: Box3D) -> PointCloud:
    return PointCloud(from_canonical_points(cloud.coords, ref), cloud.feats)


def box_to_canonical(box: Box3D, ref: Box3D) -> Box3D:
    return Box3D(to_canonical_points(box.center, ref)[0], box.size.copy(), box.yaw - ref.yaw)


def box_from_canonical(box: Box3D, ref: Box3D) -> Box3D:
    return Box3D(from_canonical_points(box.center, ref)[0], box.size.copy(), box.yaw + ref.yaw)
