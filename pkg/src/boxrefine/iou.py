"""Rotated-box IoU (BEV and 3D) and greedy NMS.

Overlap of yaw-rotated footprints is computed by Sutherland-Hodgman
convex clipping in double precision (see kernels.py for the two
backends). Areas below 1e-12 are treated as zero.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .geometry import _box_array, bev_corners

_EPS_AREA = 1e-12


def bev_iou(box_a, box_b) -> float:
    """Area IoU of the two yaw-rotated footprints in the x-y plane."""
    a = _box_array(box_a)
    b = _box_array(box_b)
    inter = kernels.clip_area(bev_corners(a), bev_corners(b))
    area_a = a[3] * a[4]
    area_b = b[3] * b[4]
    union = area_a + area_b - inter
    if union <= _EPS_AREA:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(box_a, box_b) -> float:
    """Volume IoU of two upright boxes: BEV overlap times vertical overlap."""
    a = _box_array(box_a)
    b = _box_array(box_b)
    inter_area = kernels.clip_area(bev_corners(a), bev_corners(b))
    zlo = max(a[2] - a[5] / 2.0, b[2] - b[5] / 2.0)
    zhi = min(a[2] + a[5] / 2.0, b[2] + b[5] / 2.0)
    inter = inter_area * max(0.0, zhi - zlo)
    vol_a = a[3] * a[4] * a[5]
    vol_b = b[3] * b[4] * b[5]
    union = vol_a + vol_b - inter
    if union <= _EPS_AREA:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def _stacked_corners(boxes: np.ndarray) -> np.ndarray:
    return np.stack([bev_corners(b) for b in boxes]) if len(boxes) else np.zeros((0, 4, 2))


def pairwise_bev_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(N, M) BEV IoU matrix for two (n, 7) box arrays."""
    a = np.atleast_2d(np.asarray(boxes_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(boxes_b, dtype=np.float64))
    inter = kernels.pairwise_overlap(_stacked_corners(a), _stacked_corners(b))
    area_a = (a[:, 3] * a[:, 4])[:, None]
    area_b = (b[:, 3] * b[:, 4])[None, :]
    union = area_a + area_b - inter
    out = np.where(union > _EPS_AREA, inter / np.maximum(union, _EPS_AREA), 0.0)
    return np.clip(out, 0.0, 1.0)


def pairwise_iou_3d(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(N, M) 3D IoU matrix for two (n, 7) box arrays."""
    a = np.atleast_2d(np.asarray(boxes_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(boxes_b, dtype=np.float64))
    inter_area = kernels.pairwise_overlap(_stacked_corners(a), _stacked_corners(b))
    zlo = np.maximum((a[:, 2] - a[:, 5] / 2.0)[:, None], (b[:, 2] - b[:, 5] / 2.0)[None, :])
    zhi = np.minimum((a[:, 2] + a[:, 5] / 2.0)[:, None], (b[:, 2] + b[:, 5] / 2.0)[None, :])
    inter = inter_area * np.maximum(0.0, zhi - zlo)
    vol_a = (a[:, 3] * a[:, 4] * a[:, 5])[:, None]
    vol_b = (b[:, 3] * b[:, 4] * b[:, 5])[None, :]
    union = vol_a + vol_b - inter
    return np.clip(np.where(union > _EPS_AREA, inter / np.maximum(union, _EPS_AREA), 0.0), 0.0, 1.0)


def nms(boxes_with_conf, threshold: float = 0.1) -> list[int]:
    """Greedy BEV-IoU suppression; returns kept input indices.

    Boxes are visited in descending confidence (ties broken by input
    index); a box overlapping an already-kept box with IoU strictly above
    the threshold is dropped. Kept indices come back sorted by confidence.
    """
    if not len(boxes_with_conf):
        return []
    boxes = np.stack([np.asarray(b, dtype=np.float64) for b, _ in boxes_with_conf])
    conf = np.array([float(c) for _, c in boxes_with_conf])
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    order = np.argsort(-conf, kind="stable").astype(np.int64)
    corners = np.ascontiguousarray(_stacked_corners(boxes))
    areas = np.ascontiguousarray(boxes[:, 3] * boxes[:, 4])
    keep = kernels.nms_keep(corners, areas, order, float(threshold))
    return [int(i) for i in order if keep[i]]
