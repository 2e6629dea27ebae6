"""RoI sampling at a fixed fg:bg ratio and hard-negative harvest/injection."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .anchors import BoxDelta, encode_delta
from .geometry import BBox, ScoredRegion, boxes_to_array, iou_matrix


@dataclass(frozen=True)
class RoiSample:
    roi: BBox
    is_foreground: bool
    gt_index: int | None = None
    target: BoxDelta | None = None
    is_hard: bool = False

    def __post_init__(self):
        if self.is_foreground and (self.gt_index is None or self.target is None):
            raise ValueError("foreground sample needs gt_index and target")
        if not self.is_foreground and (self.gt_index is not None or self.target is not None):
            raise ValueError("background sample must not carry gt_index or target")


@dataclass(frozen=True)
class HardNegative:
    roi: BBox
    score: float
    image_id: str


def sample_rois(
    proposals: list[BBox],
    gts: list[BBox],
    fg_iou: float = 0.5,
    batch: int = 128,
    fg_fraction: float = 0.25,
    rng: np.random.Generator | None = None,
) -> list[RoiSample]:
    """Label proposals by max-IoU and sample a batch at the fg:bg quota.

    A proposal is foreground when its max-IoU over ground truths exceeds
    fg_iou.  Up to batch*fg_fraction foregrounds are drawn uniformly, the
    remainder backgrounds; a short pool is topped up from the other side.
    """
    if batch < 4:
        raise ValueError(f"batch must be >= 4: {batch}")
    rng = rng or np.random.default_rng(0)
    if not proposals:
        return []
    parr = boxes_to_array(proposals)
    if gts:
        ious = iou_matrix(parr, boxes_to_array(gts))
        max_iou = ious.max(axis=1)
        arg = ious.argmax(axis=1)
    else:
        max_iou = np.zeros(len(proposals))
        arg = np.full(len(proposals), -1)
    fg_pool = np.flatnonzero(max_iou > fg_iou)
    bg_pool = np.flatnonzero(max_iou <= fg_iou)
    fg_quota = int(round(batch * fg_fraction))
    n_fg = min(fg_quota, len(fg_pool))
    n_bg = min(batch - n_fg, len(bg_pool))
    if n_fg + n_bg < batch:  # short background pool: refill with foregrounds
        n_fg = min(batch - n_bg, len(fg_pool))
    fg_idx = rng.choice(fg_pool, size=n_fg, replace=False) if n_fg else np.array([], dtype=int)
    bg_idx = rng.choice(bg_pool, size=n_bg, replace=False) if n_bg else np.array([], dtype=int)
    samples = [
        RoiSample(
            proposals[i],
            True,
            gt_index=int(arg[i]),
            target=encode_delta(proposals[i], gts[int(arg[i])]),
        )
        for i in sorted(fg_idx)
    ]
    samples.extend(RoiSample(proposals[i], False) for i in sorted(bg_idx))
    return samples


def achieved_ratio(samples: list[RoiSample]) -> tuple[int, int]:
    """(foreground, background) counts of a sampled batch."""
    fg = sum(1 for s in samples if s.is_foreground)
    return fg, len(samples) - fg


def mine_hard_negatives(
    dets: list[ScoredRegion],
    gts: list[BBox],
    image_id: str = "",
    score_thr: float = 0.8,
    iou_thr: float = 0.5,
) -> list[HardNegative]:
    """Confident detections that overlap no ground truth: score > score_thr
    and max-IoU over all ground-truth faces < iou_thr."""
    if not (0.0 <= score_thr <= 1.0 and 0.0 <= iou_thr <= 1.0):
        raise ValueError(f"thresholds outside [0,1]: {score_thr}, {iou_thr}")
    if not dets:
        return []
    boxes = boxes_to_array([d.region for d in dets])
    if gts:
        max_iou = iou_matrix(boxes, boxes_to_array(gts)).max(axis=1)
    else:
        max_iou = np.zeros(len(dets))
    return [
        HardNegative(d.region, d.score, image_id)
        for d, mi in zip(dets, max_iou)
        if d.score > score_thr and mi < iou_thr
    ]


def inject_hard_negatives(
    samples: list[RoiSample],
    hards: list[HardNegative],
    batch: int,
    rng: np.random.Generator | None = None,
) -> list[RoiSample]:
    """Force hard negatives into the batch as flagged background samples.

    Ordinary backgrounds are evicted uniformly at random to keep the batch
    size and the overall fg:bg split; hard negatives are never evicted.
    When hard negatives overflow the background slots, the highest harvest
    scores win and ordinary backgrounds drop to zero.
    """
    rng = rng or np.random.default_rng(0)
    if not hards:
        return list(samples)
    fg = [s for s in samples if s.is_foreground]
    bg = [s for s in samples if not s.is_foreground]
    slots = min(len(bg) if samples else batch - len(fg), batch - len(fg))
    slots = max(slots, 0)
    ranked = sorted(hards, key=lambda h: (-h.score, h.roi.as_tuple()))
    kept_hards = ranked[:slots] if len(ranked) > slots else ranked
    hard_samples = [RoiSample(h.roi, False, is_hard=True) for h in kept_hards]
    n_ordinary = max(slots - len(hard_samples), 0)
    if n_ordinary < len(bg):
        keep = sorted(rng.choice(len(bg), size=n_ordinary, replace=False)) if n_ordinary else []
        bg = [bg[i] for i in keep]
    return fg + hard_samples + bg


# -- hard-negative store (JSON lines, append-only during mining) -----------

def append_hard_negatives(path, hards: list[HardNegative]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for h in hards:
            rec = {"image_id": h.image_id, "box": list(h.roi.as_tuple()), "score": h.score}
            f.write(json.dumps(rec) + "\n")


def load_hard_negatives(path) -> dict[str, list[HardNegative]]:
    """Hard-negative store grouped by image id."""
    out: dict[str, list[HardNegative]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                hn = HardNegative(BBox(*rec["box"]), float(rec["score"]), rec["image_id"])
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{line_no}: bad hard-negative record: {e}") from e
            out.setdefault(hn.image_id, []).append(hn)
    return out
