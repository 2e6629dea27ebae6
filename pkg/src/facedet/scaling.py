"""Resize policies and horizontal-flip augmentation with annotation transforms."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Annotation, ImageRecord
from .geometry import BBox, EllipseRegion
from .tensor import Tensor


@dataclass(frozen=True)
class ScalePolicy:
    """Shorter-side resize targets with a cap on the longer side."""

    targets: tuple[float, ...]
    cap: float

    def __post_init__(self):
        if not self.targets or any(t <= 0 for t in self.targets):
            raise ValueError(f"targets must be non-empty and positive: {self.targets}")
        if self.cap < max(self.targets):
            raise ValueError(f"cap {self.cap} below max target {max(self.targets)}")


# full-scale reference defaults: fixed-scale pretraining, three-scale finetuning
PRETRAIN_POLICY = ScalePolicy(targets=(600.0,), cap=1000.0)
FINETUNE_POLICY = ScalePolicy(targets=(480.0, 600.0, 750.0), cap=1250.0)


def choose_scale(width: float, height: float, policy: ScalePolicy,
                 rng: np.random.Generator | None = None) -> float:
    """Uniformly pick a shorter-side target; shrink further if the longer
    side would exceed the cap.  A single factor preserves aspect ratio."""
    if width <= 0 or height <= 0:
        raise ValueError(f"image dims must be positive: {width}x{height}")
    rng = rng or np.random.default_rng(0)
    target = policy.targets[int(rng.integers(len(policy.targets)))]
    factor = target / min(width, height)
    if factor * max(width, height) > policy.cap:
        factor = policy.cap / max(width, height)
    return factor


def resize_image(image: Tensor, factor: float) -> Tensor:
    """Bilinear resize of an NCHW tensor; output dims round(dim*factor), min 1."""
    if factor <= 0:
        raise ValueError(f"factor must be positive: {factor}")
    data = image.data
    n, c, h, w = data.shape
    oh = max(1, int(round(h * factor)))
    ow = max(1, int(round(w * factor)))
    if (oh, ow) == (h, w) and factor == 1.0:
        return Tensor(data.copy())
    # cell-centered sample positions, clamped at the borders
    sy = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[None, None, :, None]
    fx = (sx - x0)[None, None, None, :]
    g = data[:, :, y0][:, :, :, x0] * (1 - fy) * (1 - fx)
    g += data[:, :, y1][:, :, :, x0] * fy * (1 - fx)
    g += data[:, :, y0][:, :, :, x1] * (1 - fy) * fx
    g += data[:, :, y1][:, :, :, x1] * fy * fx
    return Tensor(g)


def scale_record(record: ImageRecord, factor: float) -> ImageRecord:
    """Scale a record's dims and annotations by a uniform factor."""
    annotations = []
    for a in record.annotations:
        r = a.region
        if isinstance(r, EllipseRegion):
            scaled = EllipseRegion(r.cx * factor, r.cy * factor,
                                   r.major_r * factor, r.minor_r * factor, r.angle)
        else:
            scaled = BBox(r.x1 * factor, r.y1 * factor, r.x2 * factor, r.y2 * factor)
        annotations.append(Annotation(scaled, a.attributes))
    return replace(record, width=record.width * factor, height=record.height * factor,
                   annotations=tuple(annotations))


def hflip(image: Tensor, record: ImageRecord) -> tuple[Tensor, ImageRecord]:
    """Mirror columns and map annotations: x1' = W - x2, x2' = W - x1 for
    boxes; cx' = W - cx and angle' = -angle for ellipses."""
    wpix = image.data.shape[-1]
    if wpix != int(round(record.width)):
        raise ValueError(f"record width {record.width} does not match image width {wpix}")
    flipped = Tensor(image.data[..., ::-1].copy())
    wid = record.width
    annotations = []
    for a in record.annotations:
        r = a.region
        if isinstance(r, EllipseRegion):
            mirrored = EllipseRegion(wid - r.cx, r.cy, r.major_r, r.minor_r, -r.angle)
        else:
            mirrored = BBox(wid - r.x2, r.y1, wid - r.x1, r.y2)
        annotations.append(Annotation(mirrored, a.attributes))
    return flipped, replace(record, annotations=tuple(annotations))
