"""Multi-layer RoI feature concatenation.

Per RoI: max-pool a fixed grid from each tapped feature map, L2-normalize
each pooled blob, concatenate along channels, rescale the whole blob to a
fixed Frobenius norm, then mix channels with a 1x1 convolution.  Every
step is differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import BBox
from .net import Conv2d, Module
from .tensor import Tensor


@dataclass(frozen=True)
class ConcatConfig:
    taps: tuple[int, ...] = (0, 1, 2)
    pooled: int = 7
    target_norm: float = 4700.0
    output_channels: int = 32

    def __post_init__(self):
        if not self.taps:
            raise ValueError("at least one tap required")
        if self.pooled < 1:
            raise ValueError(f"pooled size must be >= 1: {self.pooled}")
        if self.target_norm <= 0:
            raise ValueError(f"target_norm must be positive: {self.target_norm}")
        if self.output_channels < 1:
            raise ValueError(f"output_channels must be >= 1: {self.output_channels}")


def roi_pool(fmap: Tensor, stride: float, roi: BBox, out: int) -> Tensor:
    """Max-pool an RoI (image coordinates) into an out x out grid.

    The RoI is mapped to feature coordinates by dividing by the stride and
    split into bins with boundaries rounded outward, so every bin covers at
    least one cell.  Backward routes each output's gradient to its argmax
    cell (lowest linear index on ties).
    """
    if roi.area <= 0:
        raise ValueError(f"empty roi: zero-area {roi}")
    _, c, h, w = fmap.shape
    fx1, fy1 = roi.x1 / stride, roi.y1 / stride
    fx2, fy2 = roi.x2 / stride, roi.y2 / stride
    if fx2 <= 0 or fy2 <= 0 or fx1 >= w or fy1 >= h:
        raise ValueError(f"empty roi: {roi} outside {w}x{h} feature map (stride {stride})")
    fx1, fy1 = max(fx1, 0.0), max(fy1, 0.0)
    fx2, fy2 = min(fx2, float(w)), min(fy2, float(h))

    def bin_edges(lo: float, hi: float, limit: int) -> list[tuple[int, int]]:
        edges = []
        span = hi - lo
        for k in range(out):
            a = int(math.floor(lo + k * span / out))
            b = int(math.ceil(lo + (k + 1) * span / out))
            a = min(max(a, 0), limit - 1)
            b = min(max(b, a + 1), limit)
            edges.append((a, b))
        return edges

    xbins = bin_edges(fx1, fx2, w)
    ybins = bin_edges(fy1, fy2, h)
    data = fmap.data[0]  # (C, H, W)
    pooled = np.zeros((1, c, out, out))
    arg = np.zeros((c, out, out, 2), dtype=np.int64)
    for by, (ya, yb) in enumerate(ybins):
        for bx, (xa, xb) in enumerate(xbins):
            region = data[:, ya:yb, xa:xb].reshape(c, -1)
            flat = region.argmax(axis=1)
            pooled[0, :, by, bx] = region[np.arange(c), flat]
            arg[:, by, bx, 0] = ya + flat // (xb - xa)
            arg[:, by, bx, 1] = xa + flat % (xb - xa)

    def bw(g):
        gx = np.zeros_like(fmap.data)
        ci = np.repeat(np.arange(c), out * out)
        hi = arg[..., 0].reshape(-1)
        wi = arg[..., 1].reshape(-1)
        np.add.at(gx[0], (ci, hi, wi), g[0].reshape(-1))
        T.accumulate(fmap, gx)

    return T.make_op(pooled, (fmap,), bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Divide a blob by its Frobenius norm.

    A near-zero (dead) blob passes through unchanged: a fully suppressed
    tap contributes zeros to the concatenation instead of aborting the
    step, and the identity gradient lets it recover.
    """
    n = float(np.linalg.norm(x.data))
    if n <= 1e-12:
        return x
    y = x.data / n

    def bw(g):
        T.accumulate(x, g / n - x.data * (float((g * x.data).sum()) / n ** 3))

    return T.make_op(y, (x,), bw)


def rescale_to_norm(x: Tensor, target_norm: float) -> Tensor:
    """Scale a blob so its Frobenius norm equals target_norm exactly."""
    n = float(np.linalg.norm(x.data))
    if n <= 1e-12:
        raise ValueError("unnormalizable blob: Frobenius norm below 1e-12")
    y = (target_norm / n) * x.data

    def bw(g):
        T.accumulate(x, (target_norm / n) * (g - x.data * (float((g * x.data).sum()) / n ** 2)))

    return T.make_op(y, (x,), bw)


def concat_rescale(blobs: list[Tensor], target_norm: float) -> Tensor:
    """Channel-concatenate unit-norm blobs, then rescale the whole blob."""
    spatial = {b.shape[2:] for b in blobs}
    if len(spatial) != 1:
        raise ValueError(f"spatial mismatch across blobs: {sorted(spatial)}")
    return rescale_to_norm(T.concat(blobs, axis=1), target_norm)


def reduce_1x1(blob: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel mixing; spatial dims unchanged."""
    if weights.shape[1] != blob.shape[1]:
        raise ValueError(
            f"channel mismatch: blob has {blob.shape[1]}, weights expect {weights.shape[1]}"
        )
    return T.conv2d(blob, weights, bias)


class FeatureConcatHead(Module):
    """roi_pool -> l2_normalize per tap -> concat + fixed-norm rescale -> 1x1 conv.

    ``observed_norms`` records the post-rescale blob norm of every RoI
    processed since the last reset (used to verify the fixed-norm contract).
    """

    def __init__(self, cfg: ConcatConfig, tap_channels: list[int], rng: np.random.Generator):
        if max(cfg.taps) >= len(tap_channels):
            raise ValueError(f"config taps {cfg.taps} exceed available taps {len(tap_channels)}")
        self.cfg = cfg
        total = sum(tap_channels[t] for t in cfg.taps)
        blob_size = total * cfg.pooled * cfg.pooled
        # blob entries have RMS ~ target_norm/sqrt(blob_size); the fixed
        # compensator keeps the trainable weights (and their SGD steps) at
        # ordinary He scale while the forward product stays O(1)
        self._w_scale = math.sqrt(blob_size) / cfg.target_norm
        self.reduce = Conv2d(total, cfg.output_channels, 1, rng)
        self.observed_norms: list[float] = []

    def features_for_roi(self, taps: list[tuple[Tensor, int]], roi: BBox) -> Tensor:
        blobs = [
            l2_normalize(roi_pool(taps[t][0], taps[t][1], roi, self.cfg.pooled))
            for t in self.cfg.taps
        ]
        blob = concat_rescale(blobs, self.cfg.target_norm)
        self.observed_norms.append(float(np.linalg.norm(blob.data)))
        return reduce_1x1(blob, self.reduce.w * self._w_scale, self.reduce.b)

    def __call__(self, taps: list[tuple[Tensor, int]], rois: list[BBox]) -> Tensor:
        """Stack per-RoI reduced blobs into an (R, out_channels, P, P) tensor."""
        if not rois:
            raise ValueError("no rois")
        return T.concat([self.features_for_roi(taps, r) for r in rois], axis=0)


def concat_features(taps: list[tuple[Tensor, int]], roi: BBox, cfg: ConcatConfig,
                    head: FeatureConcatHead) -> Tensor:
    """Single-RoI convenience wrapper over FeatureConcatHead."""
    if head.cfg != cfg:
        raise ValueError("head was built for a different config")
    return head.features_for_roi(taps, roi)
