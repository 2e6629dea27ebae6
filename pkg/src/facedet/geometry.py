"""Region geometry: rectangles, rotated ellipses, IoU, and non-maximum suppression.

All coordinates are continuous (sub-pixel).  Box area is (x2-x1)*(y2-y1)
with no legacy "+1".  Everything here is a pure function on immutable
inputs and safe to call concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle with ordered corners (x1 <= x2, y1 <= y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"negative extent box: {self}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def _normalize_angle(angle: float) -> float:
    # fold into [-pi/2, pi/2); an ellipse is invariant under a pi rotation
    a = math.fmod(angle + math.pi / 2, math.pi)
    if a < 0:
        a += math.pi
    return a - math.pi / 2


@dataclass(frozen=True)
class EllipseRegion:
    """Rotated ellipse; angle is the major-axis rotation from the x-axis."""

    cx: float
    cy: float
    major_r: float
    minor_r: float
    angle: float

    def __post_init__(self):
        if not (self.major_r >= self.minor_r > 0):
            raise ValueError(
                f"ellipse radii must satisfy major >= minor > 0: {self}"
            )
        object.__setattr__(self, "angle", _normalize_angle(self.angle))

    @property
    def area(self) -> float:
        return math.pi * self.major_r * self.minor_r

    def bounds(self) -> BBox:
        # half-extents of the axis-aligned bounding box of a rotated ellipse
        c, s = math.cos(self.angle), math.sin(self.angle)
        hx = math.hypot(self.major_r * c, self.minor_r * s)
        hy = math.hypot(self.major_r * s, self.minor_r * c)
        return BBox(self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)


Region = Union[BBox, EllipseRegion]


@dataclass(frozen=True)
class ScoredRegion:
    region: Region
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score outside [0,1]: {self.score}")


def iou_rect(a: BBox, b: BBox) -> float:
    """Exact intersection-over-union of two rectangles; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _region_bounds(r: Region) -> BBox:
    return r.bounds() if isinstance(r, EllipseRegion) else r


def _membership(r: Region, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean mask over the grid of cell centers (ys rows, xs cols)."""
    if isinstance(r, BBox):
        ix = (xs >= r.x1) & (xs <= r.x2)
        iy = (ys >= r.y1) & (ys <= r.y2)
        return np.outer(iy, ix)
    dx = xs[None, :] - r.cx
    dy = ys[:, None] - r.cy
    c, s = math.cos(r.angle), math.sin(r.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / r.major_r) ** 2 + (v / r.minor_r) ** 2 <= 1.0


def raster_iou(a: Region, b: Region, resolution: int = 256) -> float:
    """Grid-rasterized IoU of two regions of any shape.

    Both regions are rasterized onto one grid of resolution x resolution
    cell centers covering their joint bounding box (plus a one-cell
    margin), so identical regions score exactly 1.  Error is
    O(perimeter / resolution).
    """
    if resolution < 64:
        raise ValueError(f"resolution must be >= 64, got {resolution}")
    ba, bb = _region_bounds(a), _region_bounds(b)
    x0, x1 = min(ba.x1, bb.x1), max(ba.x2, bb.x2)
    y0, y1 = min(ba.y1, bb.y1), max(ba.y2, bb.y2)
    w, h = x1 - x0, y1 - y0
    if w <= 0 and h <= 0:
        return 0.0
    # small margin keeps boundary cells honest
    mx = max(w, 1e-12) / resolution
    my = max(h, 1e-12) / resolution
    x0, x1 = x0 - mx, x1 + mx
    y0, y1 = y0 - my, y1 + my
    xs = x0 + (np.arange(resolution) + 0.5) * ((x1 - x0) / resolution)
    ys = y0 + (np.arange(resolution) + 0.5) * ((y1 - y0) / resolution)
    ma = _membership(a, xs, ys)
    mb = _membership(b, xs, ys)
    inter = np.count_nonzero(ma & mb)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return inter / union


def nms(dets: list[ScoredRegion], threshold: float) -> list[int]:
    """Greedy non-maximum suppression over rectangle detections.

    Returns indices of kept detections in descending score order; a box is
    dropped when its IoU with an already-kept box exceeds the threshold.
    Equal scores are broken by lower original index.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"nms threshold outside [0,1]: {threshold}")
    if not dets:
        return []
    boxes = np.array([d.region.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if kept:
            kb = boxes[kept]
            iw = np.minimum(kb[:, 2], boxes[i, 2]) - np.maximum(kb[:, 0], boxes[i, 0])
            ih = np.minimum(kb[:, 3], boxes[i, 3]) - np.maximum(kb[:, 1], boxes[i, 1])
            inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
            union = areas[kept] + areas[i] - inter
            iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
            if np.any(iou > threshold):
                continue
        kept.append(i)
    return kept


def clip_box(b: BBox, width: float, height: float) -> BBox:
    """Clamp a box to [0,width] x [0,height]; corner ordering is preserved."""
    if width <= 0 or height <= 0:
        raise ValueError(f"image dims must be positive: {width}x{height}")
    return BBox(
        min(max(b.x1, 0.0), width),
        min(max(b.y1, 0.0), height),
        min(max(b.x2, 0.0), width),
        min(max(b.y2, 0.0), height),
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise rectangle IoU between (N,4) and (M,4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def boxes_to_array(boxes: list[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
