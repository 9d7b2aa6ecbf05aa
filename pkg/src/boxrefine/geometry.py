"""Oriented 7-DoF box algebra.

A box is parameterized as [x, y, z, w, l, h, theta]: center in meters,
full extents in meters, yaw in radians. Length l runs along the box body
x-axis, width w along body y, height h along z. The normalized box view
(NBV) maps the box onto the [-1, 1]^3 cube:

    nbv = diag(2/l, 2/w, 2/h) @ Rz(-theta) @ (p - center)

which is dimensionless and invariant under uniform scaling of the scene.

Functions accept plain (7,) float arrays or Box7 instances (Box7 supports
the array protocol). Hot paths work on raw arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PARAM_NAMES = ("x", "y", "z", "w", "l", "h", "theta")


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    wrapped = np.mod(theta, 2.0 * np.pi)
    wrapped = np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)
    if np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Box7:
    """Upright oriented box: center (x, y, z), extents (w, l, h), yaw theta."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float

    def __post_init__(self):
        if not all(np.isfinite([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])):
            raise DataError("box parameters must be finite")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise DataError(f"box extents must be positive, got w={self.w} l={self.l} h={self.h}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, arr) -> "Box7":
        a = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(*a.tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    def __array__(self, dtype=None, copy=None):
        a = self.as_array()
        return a.astype(dtype) if dtype is not None else a


@dataclass(frozen=True)
class PointCloud:
    """N points in world frame, with optional per-point labels.

    Labels tag foreground points with their object index; -1 is background.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (pts.shape[0],):
                raise DataError("labels must have one entry per point")
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class NbvCloud:
    """Points in the normalized box frame plus their source indices."""

    points: np.ndarray
    source_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"nbv points must be (N, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.source_indices is None:
            object.__setattr__(self, "source_indices", np.arange(pts.shape[0], dtype=np.int64))
        else:
            idx = np.asarray(self.source_indices, dtype=np.int64)
            if idx.shape != (pts.shape[0],):
                raise DataError("source_indices must have one entry per point")
            object.__setattr__(self, "source_indices", idx)

    def __len__(self):
        return self.points.shape[0]


def _box_array(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    if b.shape != (7,):
        raise DataError(f"box must be a 7-vector, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise DataError("box parameters must be finite")
    if b[3] <= 0 or b[4] <= 0 or b[5] <= 0:
        raise DataError("box extents must be positive")
    return b


def _points_array(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, (PointCloud, NbvCloud)) else np.asarray(cloud, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"points must be (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DataError("point coordinates must be finite")
    return pts


def nbv_points(points: np.ndarray, box) -> np.ndarray:
    """NBV coordinates of raw (N, 3) points; no validation, hot path."""
    b = np.asarray(box, dtype=np.float64)
    c, s = np.cos(b[6]), np.sin(b[6])
    d = points - b[:3]
    bx = c * d[:, 0] + s * d[:, 1]
    by = -s * d[:, 0] + c * d[:, 1]
    return np.stack([(2.0 / b[4]) * bx, (2.0 / b[3]) * by, (2.0 / b[5]) * d[:, 2]], axis=1)


def nbv_transform(cloud, box) -> NbvCloud:
    """Transform a point cloud into the normalized box view of `box`."""
    pts = _points_array(cloud)
    b = _box_array(box)
    src = cloud.source_indices if isinstance(cloud, NbvCloud) else np.arange(pts.shape[0], dtype=np.int64)
    return NbvCloud(points=nbv_points(pts, b), source_indices=np.array(src))


def nbv_inverse_points(nbv: np.ndarray, box) -> np.ndarray:
    """World coordinates of raw (N, 3) NBV points; no validation."""
    b = np.asarray(box, dtype=np.float64)
    c, s = np.cos(b[6]), np.sin(b[6])
    bx = nbv[:, 0] * (b[4] / 2.0)
    by = nbv[:, 1] * (b[3] / 2.0)
    bz = nbv[:, 2] * (b[5] / 2.0)
    return np.stack([c * bx - s * by + b[0], s * bx + c * by + b[1], bz + b[2]], axis=1)


def nbv_inverse(nbv, box) -> PointCloud:
    """Exact inverse of nbv_transform."""
    pts = _points_array(nbv)
    b = _box_array(box)
    return PointCloud(points=nbv_inverse_points(pts, b))


def nbv_jacobian_points(points: np.ndarray, box) -> np.ndarray:
    """Per-point (N, 3, 7) Jacobian of NBV coordinates w.r.t. box parameters.

    Parameter order matches the box vector: (x, y, z, w, l, h, theta).
    """
    b = np.asarray(box, dtype=np.float64)
    w, l, h = b[3], b[4], b[5]
    c, s = np.cos(b[6]), np.sin(b[6])
    d = points - b[:3]
    u = (2.0 / l) * (c * d[:, 0] + s * d[:, 1])
    v = (2.0 / w) * (-s * d[:, 0] + c * d[:, 1])
    g = (2.0 / h) * d[:, 2]
    n = points.shape[0]
    jac = np.zeros((n, 3, 7))
    jac[:, 0, 0] = -2.0 * c / l
    jac[:, 0, 1] = -2.0 * s / l
    jac[:, 0, 4] = -u / l
    jac[:, 0, 6] = (w / l) * v
    jac[:, 1, 0] = 2.0 * s / w
    jac[:, 1, 1] = -2.0 * c / w
    jac[:, 1, 3] = -v / w
    jac[:, 1, 6] = -(l / w) * u
    jac[:, 2, 2] = -2.0 / h
    jac[:, 2, 5] = -g / h
    return jac


def nbv_jacobian(cloud, box) -> np.ndarray:
    """Validated (N, 3, 7) NBV Jacobian for a cloud and box."""
    pts = _points_array(cloud)
    b = _box_array(box)
    return nbv_jacobian_points(pts, b)


_CORNER_SIGNS = np.array(
    [
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
    ],
    dtype=np.float64,
)


def box_corners(box) -> np.ndarray:
    """Eight world-frame corners; their NBV images are the signs (+-1)^3."""
    b = _box_array(box)
    return nbv_inverse_points(_CORNER_SIGNS, b)


def bev_corners(box) -> np.ndarray:
    """Four CCW corners of the box footprint in the x-y plane, (4, 2)."""
    b = np.asarray(box, dtype=np.float64)
    c, s = np.cos(b[6]), np.sin(b[6])
    hl, hw = b[4] / 2.0, b[3] / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + b[:2]


def crop_context(cloud, box, context: float) -> NbvCloud:
    """NBV transform restricted to points with all |coords| <= context.

    Keeps source indices so cropped points can be traced back to the
    originating cloud. The result may be empty.
    """
    if context < 1:
        raise DataError(f"context multiplier must be >= 1, got {context}")
    nbv = nbv_transform(cloud, box)
    inside = np.all(np.abs(nbv.points) <= context, axis=1)
    return NbvCloud(points=nbv.points[inside], source_indices=nbv.source_indices[inside])
