"""RPN anchor grids, box-delta coding, anchor labeling, proposal selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, ScoredRegion, boxes_to_array, iou_matrix, nms

LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_IGNORE = -1


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid layout: square sizes, height:width ratios, center stride."""

    sizes: tuple[float, ...] = (64.0, 128.0, 256.0, 512.0)
    ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    stride: int = 16

    def __post_init__(self):
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise ValueError(f"sizes must be non-empty and positive: {self.sizes}")
        if list(self.sizes) != sorted(set(self.sizes)):
            raise ValueError(f"sizes must be strictly increasing: {self.sizes}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError(f"ratios must be non-empty and positive: {self.ratios}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive: {self.stride}")

    @property
    def per_location(self) -> int:
        return len(self.sizes) * len(self.ratios)


@dataclass(frozen=True)
class BoxDelta:
    """Center offsets normalized by anchor size plus log-scale size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise ValueError(f"non-finite box delta: {self}")


def feature_map_size(width: int, height: int, stride: int) -> tuple[int, int]:
    """Feature-map cells covering an image: ceil division by the stride."""
    return (-(-width // stride), -(-height // stride))


def anchor_shapes(cfg: AnchorConfig) -> np.ndarray:
    """(per_location, 2) array of (width, height); area is preserved at size^2."""
    shapes = []
    for s in cfg.sizes:
        for r in cfg.ratios:
            rt = math.sqrt(r)
            shapes.append((s / rt, s * rt))
    return np.array(shapes, dtype=np.float64)


def generate_anchor_array(cfg: AnchorConfig, fmap_w: int, fmap_h: int) -> np.ndarray:
    """All anchors as an (fmap_h * fmap_w * per_location, 4) corner array.

    Ordering is row-major over cells (y outer, x inner), then sizes, then
    ratios; the RPN head's channel layout relies on this.
    """
    if fmap_w < 1 or fmap_h < 1:
        raise ValueError(f"feature map must be at least 1x1: {fmap_w}x{fmap_h}")
    wh = anchor_shapes(cfg)  # (A, 2)
    cx = (np.arange(fmap_w) + 0.5) * cfg.stride
    cy = (np.arange(fmap_h) + 0.5) * cfg.stride
    cxg, cyg = np.meshgrid(cx, cy)  # (H, W)
    centers = np.stack([cxg.ravel(), cyg.ravel()], axis=1)  # (H*W, 2)
    half = 0.5 * wh
    boxes = np.concatenate(
        [
            (centers[:, None, :] - half[None, :, :]),
            (centers[:, None, :] + half[None, :, :]),
        ],
        axis=2,
    )  # (H*W, A, 4)
    return boxes.reshape(-1, 4)


def generate_anchors(cfg: AnchorConfig, fmap_w: int, fmap_h: int) -> list[BBox]:
    arr = generate_anchor_array(cfg, fmap_w, fmap_h)
    return [BBox(*row) for row in arr]


def encode_delta(anchor: BBox, gt: BBox) -> BoxDelta:
    """Faster R-CNN box coding of gt relative to anchor."""
    if anchor.area <= 0 or gt.area <= 0:
        raise ValueError("degenerate box")
    acx, acy = anchor.center
    gcx, gcy = gt.center
    return BoxDelta(
        (gcx - acx) / anchor.width,
        (gcy - acy) / anchor.height,
        math.log(gt.width / anchor.width),
        math.log(gt.height / anchor.height),
    )


def decode_delta(anchor: BBox, d: BoxDelta) -> BBox:
    """Exact inverse of encode_delta."""
    if anchor.area <= 0:
        raise ValueError("degenerate box")
    acx, acy = anchor.center
    cx = acx + d.tx * anchor.width
    cy = acy + d.ty * anchor.height
    w = anchor.width * math.exp(d.tw)
    h = anchor.height * math.exp(d.th)
    return BBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized encode_delta over matched (N,4) anchor/gt corner arrays."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    gcx = gts[:, 0] + 0.5 * gw
    gcy = gts[:, 1] + 0.5 * gh
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)],
        axis=1,
    )


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized decode_delta over (N,4) arrays."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def label_anchors(
    anchors,
    gts,
    pos_thr: float = 0.7,
    neg_thr: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Assign {positive, negative, ignore} labels and matched gt indices.

    Positive: max-IoU >= pos_thr, or being the best anchor for some gt
    (so every gt with a finite-IoU anchor gets at least one positive).
    Negative: max-IoU < neg_thr.  Everything in between is ignored.
    """
    if not (0.0 <= neg_thr <= pos_thr <= 1.0):
        raise ValueError(f"need 0 <= neg_thr <= pos_thr <= 1: {neg_thr}, {pos_thr}")
    a = anchors if isinstance(anchors, np.ndarray) else boxes_to_array(anchors)
    g = gts if isinstance(gts, np.ndarray) else boxes_to_array(gts)
    n = len(a)
    labels = np.full(n, LABEL_NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if len(g) == 0 or n == 0:
        return labels, matched
    ious = iou_matrix(a, g)  # (N, M)
    max_iou = ious.max(axis=1)
    argmax_gt = ious.argmax(axis=1)
    labels[max_iou >= neg_thr] = LABEL_IGNORE
    labels[max_iou >= pos_thr] = LABEL_POSITIVE
    # best anchor per gt is positive regardless of threshold
    gt_best = ious.max(axis=0)
    for j in range(len(g)):
        if gt_best[j] > 0:
            best = np.flatnonzero(ious[:, j] == gt_best[j])
            labels[best] = LABEL_POSITIVE
            matched[best] = j
    pos = labels == LABEL_POSITIVE
    unset = pos & (matched < 0)
    matched[unset] = argmax_gt[unset]
    return labels, matched


def select_proposals(
    scored: list[ScoredRegion],
    pre_nms_k: int,
    nms_thr: float,
    post_nms_k: int,
) -> list[ScoredRegion]:
    """Top-k by score, NMS, then truncate to post_nms_k."""
    if not (pre_nms_k >= post_nms_k >= 1):
        raise ValueError(f"need pre_nms_k >= post_nms_k >= 1: {pre_nms_k}, {post_nms_k}")
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))[:pre_nms_k]
    top = [scored[i] for i in order]
    kept = nms(top, nms_thr)
    return [top[i] for i in kept[:post_nms_k]]
