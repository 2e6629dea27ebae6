import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facedet.geometry import (BBox, EllipseRegion, ScoredRegion, clip_box,
                              iou_matrix, iou_rect, nms, raster_iou)


def boxes(max_coord=100.0):
    coord = st.floats(0, max_coord, allow_nan=False, allow_infinity=False)
    return st.tuples(coord, coord, coord, coord).map(
        lambda t: BBox(min(t[0], t[2]), min(t[1], t[3]), max(t[0], t[2]), max(t[1], t[3]))
    )


class TestBBox:
    def test_rejects_negative_extent(self):
        with pytest.raises(ValueError):
            BBox(5, 0, 0, 5)

    def test_degenerate_allowed(self):
        assert BBox(3, 3, 3, 3).area == 0

    def test_area(self):
        assert BBox(0, 0, 4, 5).area == 20


class TestEllipse:
    def test_radius_ordering(self):
        with pytest.raises(ValueError):
            EllipseRegion(0, 0, 2, 5, 0)

    def test_angle_normalized(self):
        e = EllipseRegion(0, 0, 5, 3, math.pi / 2)
        assert -math.pi / 2 <= e.angle < math.pi / 2

    def test_bounds_axis_aligned(self):
        e = EllipseRegion(10, 10, 4, 2, 0)
        b = e.bounds()
        assert b.as_tuple() == pytest.approx((6, 8, 14, 12))


class TestIouRect:
    def test_identity(self):
        assert iou_rect(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou_rect(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        # 50 / (100 + 100 - 50)
        assert iou_rect(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_degenerate_yields_zero(self):
        assert iou_rect(BBox(1, 1, 1, 1), BBox(1, 1, 1, 1)) == 0.0

    @given(boxes(), boxes())
    def test_symmetric(self, a, b):
        assert iou_rect(a, b) == iou_rect(b, a)

    @given(boxes())
    def test_self_iou_one(self, a):
        if a.area > 0:
            assert iou_rect(a, a) == 1.0


class TestRasterIou:
    def test_identical_circles(self):
        c = EllipseRegion(5, 5, 3, 3, 0)
        assert raster_iou(c, c, 256) == 1.0

    def test_agrees_with_exact_rect(self):
        got = raster_iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10), 1024)
        assert got == pytest.approx(1 / 3, abs=0.01)

    def test_inscribed_circle(self):
        # circle area pi*25 inside a 10x10 box: IoU = pi/4
        got = raster_iou(EllipseRegion(5, 5, 5, 5, 0), BBox(0, 0, 10, 10), 1024)
        assert got == pytest.approx(math.pi / 4, abs=0.01)

    def test_rejects_low_resolution(self):
        with pytest.raises(ValueError):
            raster_iou(BBox(0, 0, 1, 1), BBox(0, 0, 1, 1), 32)

    def test_rotated_ellipse_symmetric(self):
        e = EllipseRegion(5, 5, 4, 2, 0.7)
        b = BBox(2, 2, 8, 8)
        assert raster_iou(e, b, 512) == pytest.approx(raster_iou(b, e, 512), abs=1e-12)

    def test_random_rects_match_exact(self, rng):
        for _ in range(50):
            vals = rng.uniform(0, 50, 8)
            a = BBox(min(vals[0], vals[2]), min(vals[1], vals[3]),
                     max(vals[0], vals[2]), max(vals[1], vals[3]))
            b = BBox(min(vals[4], vals[6]), min(vals[5], vals[7]),
                     max(vals[4], vals[6]), max(vals[5], vals[7]))
            assert raster_iou(a, b, 1024) == pytest.approx(iou_rect(a, b), abs=0.02)


def brute_force_nms(dets, threshold):
    """Independent O(n^2) reference."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if iou_rect(dets[i].region, dets[j].region) > threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


class TestNms:
    def test_single_box(self):
        dets = [ScoredRegion(BBox(0, 0, 10, 10), 0.5)]
        assert nms(dets, 0.3) == [0]

    def test_identical_boxes(self):
        dets = [ScoredRegion(BBox(0, 0, 10, 10), 0.9),
                ScoredRegion(BBox(0, 0, 10, 10), 0.8)]
        assert nms(dets, 0.3) == [0]

    def test_disjoint_kept(self):
        dets = [ScoredRegion(BBox(0, 0, 10, 10), 0.5),
                ScoredRegion(BBox(20, 20, 30, 30), 0.9)]
        assert nms(dets, 0.3) == [1, 0]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_tie_break_lower_index(self):
        dets = [ScoredRegion(BBox(0, 0, 10, 10), 0.7),
                ScoredRegion(BBox(0, 0, 10, 10), 0.7)]
        assert nms(dets, 0.3) == [0]

    def test_matches_brute_force_random(self, rng):
        for _ in range(30):
            n = int(rng.integers(1, 120))
            xy = rng.uniform(0, 60, (n, 2))
            wh = rng.uniform(1, 25, (n, 2))
            scores = rng.uniform(0, 1, n)
            dets = [ScoredRegion(BBox(x, y, x + w, y + h), s)
                    for (x, y), (w, h), s in zip(xy, wh, scores)]
            thr = float(rng.uniform(0.1, 0.9))
            assert nms(dets, thr) == brute_force_nms(dets, thr)

    def test_order_invariance_up_to_tiebreak(self, rng):
        n = 60
        xy = rng.uniform(0, 40, (n, 2))
        wh = rng.uniform(2, 20, (n, 2))
        scores = rng.uniform(0, 1, n)
        dets = [ScoredRegion(BBox(x, y, x + w, y + h), s)
                for (x, y), (w, h), s in zip(xy, wh, scores)]
        kept_boxes = [dets[i].region for i in nms(dets, 0.4)]
        perm = rng.permutation(n)
        shuffled = [dets[i] for i in perm]
        kept_shuffled = [shuffled[i].region for i in nms(shuffled, 0.4)]
        assert kept_boxes == kept_shuffled  # scores are distinct w.p. 1


class TestClipBox:
    def test_clamp(self):
        assert clip_box(BBox(-5, -5, 20, 20), 10, 10).as_tuple() == (0, 0, 10, 10)

    def test_inside_unchanged(self):
        b = BBox(2, 3, 8, 9)
        assert clip_box(b, 10, 10) == b

    def test_full_clamp_degenerate(self):
        c = clip_box(BBox(15, 15, 20, 20), 10, 10)
        assert c.as_tuple() == (10, 10, 10, 10)
        assert c.area == 0

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            clip_box(BBox(0, 0, 1, 1), 0, 10)


def test_iou_matrix_matches_scalar(rng):
    a = rng.uniform(0, 50, (5, 2))
    b = rng.uniform(0, 50, (7, 2))
    boxes_a = np.hstack([a, a + rng.uniform(1, 20, (5, 2))])
    boxes_b = np.hstack([b, b + rng.uniform(1, 20, (7, 2))])
    m = iou_matrix(boxes_a, boxes_b)
    for i in range(5):
        for j in range(7):
            assert m[i, j] == pytest.approx(
                iou_rect(BBox(*boxes_a[i]), BBox(*boxes_b[j])))
