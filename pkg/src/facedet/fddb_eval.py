"""FDDB-protocol scoring: optimal detection/annotation matching, discrete and
continuous ROC curves, box-to-ellipse conversion, and report emission."""
from __future__ import annotations

import math
import os
import xml.sax.saxutils
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import Annotation, ImageRecord
from .geometry import BBox, EllipseRegion, Region, ScoredRegion, iou_rect, raster_iou

MIN_MATCH_IOU = 1e-6
DISCRETE_TP_IOU = 0.5


def pair_iou(a: Region, b: Region, resolution: int = 256) -> float:
    """IoU in native shapes: exact for two rectangles, rasterized otherwise."""
    if isinstance(a, BBox) and isinstance(b, BBox):
        return iou_rect(a, b)
    return raster_iou(a, b, resolution)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]  # (det idx, gt idx, IoU)
    unmatched_dets: tuple[int, ...]
    unmatched_gts: tuple[int, ...]


def _regions(gts) -> list[Region]:
    return [g.region if isinstance(g, Annotation) else g for g in gts]


def match_detections(dets: list[ScoredRegion], gts, min_iou: float = MIN_MATCH_IOU) -> MatchResult:
    """One-to-one assignment maximizing total IoU; pairs below min_iou are
    forbidden.  Optimal (Hungarian) rather than greedy-by-score."""
    gt_regions = _regions(gts)
    iou = np.zeros((len(dets), len(gt_regions)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gt_regions):
            iou[i, j] = pair_iou(d.region, g)
    return match_from_matrix(iou, min_iou)


def match_from_matrix(iou: np.ndarray, min_iou: float = MIN_MATCH_IOU) -> MatchResult:
    nd, ng = iou.shape
    if nd == 0 or ng == 0:
        return MatchResult((), tuple(range(nd)), tuple(range(ng)))
    cost = -np.where(iou >= min_iou, iou, 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(
        (int(r), int(c), float(iou[r, c]))
        for r, c in zip(rows, cols)
        if iou[r, c] >= min_iou
    )
    md = {p[0] for p in pairs}
    mg = {p[1] for p in pairs}
    return MatchResult(
        pairs,
        tuple(i for i in range(nd) if i not in md),
        tuple(j for j in range(ng) if j not in mg),
    )


@dataclass(frozen=True)
class RocCurve:
    """Threshold sweep points: (threshold, total false positives, y)."""

    thresholds: tuple[float, ...]
    false_positives: tuple[int, ...]
    ys: tuple[float, ...]

    def y_at_fp(self, max_fp: float) -> float:
        """Best y over sweep points with at most max_fp false positives."""
        best = 0.0
        for fp, y in zip(self.false_positives, self.ys):
            if fp <= max_fp:
                best = max(best, y)
        return best


@dataclass(frozen=True)
class EvalReport:
    """Discrete and continuous curves from one sweep over shared thresholds."""

    thresholds: tuple[float, ...]
    false_positives: tuple[int, ...]
    y_discrete: tuple[float, ...]
    y_continuous: tuple[float, ...]
    total_faces: int

    @property
    def discrete(self) -> RocCurve:
        return RocCurve(self.thresholds, self.false_positives, self.y_discrete)

    @property
    def continuous(self) -> RocCurve:
        return RocCurve(self.thresholds, self.false_positives, self.y_continuous)


def _image_prefix_stats(dets: list[ScoredRegion], gts, continuous_above_tp_only: bool):
    """For each prefix of score-sorted detections: (score, fp, tp, cont_sum)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    sorted_dets = [dets[i] for i in order]
    gt_regions = _regions(gts)
    iou = np.zeros((len(sorted_dets), len(gt_regions)))
    for i, d in enumerate(sorted_dets):
        for j, g in enumerate(gt_regions):
            iou[i, j] = pair_iou(d.region, g)
    steps = []
    k = 0
    while k < len(sorted_dets):
        # detections sharing a score enter the sweep together
        k2 = k + 1
        while k2 < len(sorted_dets) and sorted_dets[k2].score == sorted_dets[k].score:
            k2 += 1
        m = match_from_matrix(iou[:k2], MIN_MATCH_IOU)
        tp = sum(1 for _, _, v in m.pairs if v > DISCRETE_TP_IOU)
        if continuous_above_tp_only:
            cont = sum(v for _, _, v in m.pairs if v > DISCRETE_TP_IOU)
        else:
            cont = sum(v for _, _, v in m.pairs)
        fp = k2 - len(m.pairs)
        steps.append((sorted_dets[k].score, fp, tp, cont))
        k = k2
    return steps


def evaluate(images: list[tuple[list[ScoredRegion], list]],
             continuous_above_tp_only: bool = False) -> EvalReport:
    """Sweep the score threshold over all detection scores present.

    images: per-image (detections, ground-truth annotations or regions).
    Discrete y is matched-pair count at IoU > 0.5 over total faces;
    continuous y is summed matched IoU over total faces; x is the total
    count of unmatched detections.
    """
    total_faces = sum(len(gts) for _, gts in images)
    if total_faces == 0:
        raise ValueError("no ground-truth faces to evaluate against")
    per_image = [
        _image_prefix_stats(dets, gts, continuous_above_tp_only) for dets, gts in images
    ]
    all_scores = sorted({s[0] for steps in per_image for s in steps}, reverse=True)
    if not all_scores:
        return EvalReport((0.0,), (0,), (0.0,), (0.0,), total_faces)
    ptr = [0] * len(per_image)
    cur = [(0, 0, 0.0)] * len(per_image)  # (fp, tp, cont)
    tot_fp, tot_tp, tot_cont = 0, 0, 0.0
    thresholds, fps, yd, yc = [], [], [], []
    for t in all_scores:
        for i, steps in enumerate(per_image):
            while ptr[i] < len(steps) and steps[ptr[i]][0] >= t:
                _, fp, tp, cont = steps[ptr[i]]
                old = cur[i]
                tot_fp += fp - old[0]
                tot_tp += tp - old[1]
                tot_cont += cont - old[2]
                cur[i] = (fp, tp, cont)
                ptr[i] += 1
        thresholds.append(t)
        fps.append(tot_fp)
        yd.append(tot_tp / total_faces)
        yc.append(tot_cont / total_faces)
    return EvalReport(tuple(thresholds), tuple(fps), tuple(yd), tuple(yc), total_faces)


def discrete_roc(images) -> RocCurve:
    return evaluate(images).discrete


def continuous_roc(images) -> RocCurve:
    return evaluate(images).continuous


# -- box-to-ellipse conversion --------------------------------------------

@lru_cache(maxsize=None)
def _optimal_axis_factor(resolution: int = 512) -> float:
    """Single scale factor k maximizing IoU between a box and the inscribed
    axis-aligned ellipse with semi-axes (k w/2, k h/2).

    The objective is affine-invariant, so k is found once on the unit
    square (golden-section on [0.8, 1.6]) and reused for every box.
    """
    square = BBox(0.0, 0.0, 1.0, 1.0)

    def objective(k: float) -> float:
        return raster_iou(EllipseRegion(0.5, 0.5, k / 2, k / 2, 0.0), square, resolution)

    phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = 0.8, 1.6
    c = hi - phi * (hi - lo)
    d = lo + phi * (hi - lo)
    fc, fd = objective(c), objective(d)
    for _ in range(40):
        if fc < fd:
            lo, c, fc = c, d, fd
            d = lo + phi * (hi - lo)
            fd = objective(d)
        else:
            hi, d, fd = d, c, fc
            c = hi - phi * (hi - lo)
            fc = objective(c)
    return (lo + hi) / 2


def box_to_ellipse(b: BBox) -> EllipseRegion:
    """Axis-aligned ellipse sharing the box center, semi-axes scaled by the
    IoU-maximizing factor."""
    if b.area <= 0:
        raise ValueError(f"degenerate box: {b}")
    k = _optimal_axis_factor()
    cx, cy = b.center
    rx, ry = k * b.width / 2, k * b.height / 2
    if rx >= ry:
        return EllipseRegion(cx, cy, rx, ry, 0.0)
    return EllipseRegion(cx, cy, ry, rx, -math.pi / 2)


# -- fold aggregation -------------------------------------------------------

def aggregate_folds(fold_images: list[list[tuple[list[ScoredRegion], list]]],
                    expected_k: int | None = None) -> tuple[EvalReport, list[EvalReport]]:
    """Pool detections across folds into one corpus-level report; per-fold
    reports are returned alongside."""
    if not fold_images:
        raise ValueError("no folds")
    if expected_k is not None and len(fold_images) != expected_k:
        raise ValueError(f"fold count mismatch: got {len(fold_images)}, expected {expected_k}")
    per_fold = [evaluate(images) for images in fold_images]
    pooled = evaluate([pair for images in fold_images for pair in images])
    return pooled, per_fold


# -- detection file format (FDDB submission style) ---------------------------

def format_detections(per_image: list[tuple[str, list[ScoredRegion]]]) -> str:
    """Image name line, count line, then one detection per line:
    "x y w h score" for boxes or "major minor angle cx cy score" for ellipses."""
    lines: list[str] = []
    for name, dets in per_image:
        lines.append(name)
        lines.append(str(len(dets)))
        for d in dets:
            r = d.region
            if isinstance(r, EllipseRegion):
                lines.append(f"{r.major_r:.6f} {r.minor_r:.6f} {r.angle:.6f} "
                             f"{r.cx:.6f} {r.cy:.6f} {d.score:.6f}")
            else:
                lines.append(f"{r.x1:.6f} {r.y1:.6f} {r.width:.6f} {r.height:.6f} {d.score:.6f}")
    return "\n".join(lines) + "\n"


def parse_detections(text: str) -> list[tuple[str, list[ScoredRegion]]]:
    lines = text.splitlines()
    out: list[tuple[str, list[ScoredRegion]]] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        i += 1
        if i >= len(lines):
            raise ValueError(f"line {i + 1}: missing detection count for {name}")
        try:
            count = int(lines[i].strip())
        except ValueError as e:
            raise ValueError(f"line {i + 1}: bad detection count {lines[i]!r}") from e
        i += 1
        dets: list[ScoredRegion] = []
        for k in range(count):
            if i >= len(lines):
                raise ValueError(f"line {i + 1}: expected detection {k + 1}/{count} for {name}")
            parts = lines[i].split()
            try:
                if len(parts) == 5:
                    x, y, w, h, score = (float(v) for v in parts)
                    region: Region = BBox.from_xywh(x, y, w, h)
                elif len(parts) == 6:
                    major, minor, angle, cx, cy, score = (float(v) for v in parts)
                    region = EllipseRegion(cx, cy, major, minor, angle)
                else:
                    raise ValueError(f"expected 5 or 6 fields, got {len(parts)}")
                dets.append(ScoredRegion(region, score))
            except ValueError as e:
                raise ValueError(f"line {i + 1}: malformed detection {lines[i]!r}: {e}") from e
            i += 1
        out.append((name, dets))
    return out


# -- report emission ---------------------------------------------------------

def emit_report(report: EvalReport, out_dir, basename: str = "roc") -> tuple[str, str]:
    """Write <basename>.csv and a matplotlib-rendered <basename>.svg.

    Output is deterministic: fixed float formatting, pinned SVG hash salt,
    and no embedded timestamps.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{basename}.csv")
    svg_path = os.path.join(out_dir, f"{basename}.svg")
    try:
        with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("threshold,false_positives,y_discrete,y_continuous\n")
            for t, fp, yd, yc in zip(report.thresholds, report.false_positives,
                                     report.y_discrete, report.y_continuous):
                f.write(f"{t:.6f},{fp},{yd:.6f},{yc:.6f}\n")
        _plot_curves(
            {"discrete": report.discrete, "continuous": report.continuous},
            svg_path,
            title="FDDB-style ROC",
        )
    except OSError as e:
        raise OSError(f"cannot write report under {out_dir}: {e}") from e
    return csv_path, svg_path


def _plot_curves(curves: dict[str, RocCurve], svg_path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "facedet"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, curve in sorted(curves.items()):
            ax.plot(curve.false_positives, curve.ys, marker=".", label=label)
        ax.set_xlabel("total false positives")
        ax.set_ylabel("score")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_comparison(reports: dict[str, EvalReport], out_dir, basename: str = "comparison") -> tuple[str, str]:
    """Multi-run comparison: one CSV (long format) and one SVG per score kind."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{basename}.csv")
    svg_path = os.path.join(out_dir, f"{basename}.svg")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("run,threshold,false_positives,y_discrete,y_continuous\n")
        for run in sorted(reports):
            r = reports[run]
            for t, fp, yd, yc in zip(r.thresholds, r.false_positives, r.y_discrete, r.y_continuous):
                f.write(f"{xml.sax.saxutils.escape(run)},{t:.6f},{fp},{yd:.6f},{yc:.6f}\n")
    _plot_curves({run: r.discrete for run, r in reports.items()}, svg_path,
                 title="discrete ROC comparison")
    return csv_path, svg_path
