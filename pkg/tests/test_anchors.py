import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facedet.anchors import (AnchorConfig, BoxDelta, decode_delta, decode_deltas,
                             encode_delta, encode_deltas, feature_map_size,
                             generate_anchor_array, generate_anchors, label_anchors,
                             select_proposals, LABEL_IGNORE, LABEL_NEGATIVE,
                             LABEL_POSITIVE)
from facedet.geometry import BBox, ScoredRegion, iou_rect


class TestAnchorConfig:
    def test_defaults_are_twelve(self):
        assert AnchorConfig().per_location == 12

    def test_rejects_unsorted_sizes(self):
        with pytest.raises(ValueError):
            AnchorConfig(sizes=(128.0, 64.0))

    def test_rejects_nonpositive_ratio(self):
        with pytest.raises(ValueError):
            AnchorConfig(ratios=(1.0, 0.0))


class TestGenerate:
    def test_one_cell_twelve_anchors(self):
        assert len(generate_anchors(AnchorConfig(), 1, 1)) == 12

    def test_two_by_two(self):
        assert len(generate_anchors(AnchorConfig(), 2, 2)) == 48

    def test_area_preserving_shape(self):
        cfg = AnchorConfig(sizes=(128.0,), ratios=(2.0,))
        (a,) = generate_anchors(cfg, 1, 1)
        assert a.width == pytest.approx(90.50966799, abs=1e-6)
        assert a.height == pytest.approx(181.01933598, abs=1e-6)
        assert a.area == pytest.approx(128.0 ** 2, rel=1e-9)

    def test_all_areas_match_sizes(self):
        cfg = AnchorConfig()
        arr = generate_anchor_array(cfg, 3, 2)
        areas = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
        expected = np.tile(np.repeat(np.array(cfg.sizes) ** 2, len(cfg.ratios)), 6)
        assert np.allclose(areas, expected, rtol=1e-9)

    def test_centers_at_half_stride(self):
        cfg = AnchorConfig(sizes=(32.0,), ratios=(1.0,), stride=16)
        arr = generate_anchor_array(cfg, 2, 1)
        centers = (arr[:, :2] + arr[:, 2:]) / 2
        assert centers[0].tolist() == [8.0, 8.0]
        assert centers[1].tolist() == [24.0, 8.0]

    def test_feature_map_size_ceils(self):
        assert feature_map_size(100, 50, 16) == (7, 4)


class TestDeltas:
    def test_identity(self):
        a = BBox(0, 0, 10, 10)
        assert encode_delta(a, a) == BoxDelta(0, 0, 0, 0)

    def test_double_size(self):
        d = encode_delta(BBox(0, 0, 10, 10), BBox(0, 0, 20, 20))
        assert (d.tx, d.ty) == (0.5, 0.5)
        assert d.tw == pytest.approx(math.log(2))
        assert d.th == pytest.approx(math.log(2))

    def test_decode_inverse_example(self):
        b = decode_delta(BBox(0, 0, 10, 10), BoxDelta(0.5, 0.5, math.log(2), math.log(2)))
        assert b.as_tuple() == pytest.approx((0, 0, 20, 20))

    def test_zero_delta_identity(self):
        a = BBox(3, 4, 9, 11)
        assert decode_delta(a, BoxDelta(0, 0, 0, 0)).as_tuple() == pytest.approx(a.as_tuple())

    def test_large_negative_log_scale_stays_valid(self):
        b = decode_delta(BBox(0, 0, 10, 10), BoxDelta(0, 0, -50, -50))
        assert b.x2 >= b.x1 and b.y2 >= b.y1
        assert b.area < 1e-30

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            encode_delta(BBox(0, 0, 0, 10), BBox(0, 0, 5, 5))

    def test_nonfinite_delta_rejected(self):
        with pytest.raises(ValueError):
            BoxDelta(float("nan"), 0, 0, 0)

    @given(st.lists(st.floats(1, 50), min_size=8, max_size=8))
    def test_roundtrip_random(self, vals):
        a = BBox(vals[0], vals[1], vals[0] + vals[2], vals[1] + vals[3])
        g = BBox(vals[4], vals[5], vals[4] + vals[6], vals[5] + vals[7])
        back = decode_delta(a, encode_delta(a, g))
        assert back.as_tuple() == pytest.approx(g.as_tuple(), abs=1e-9)

    def test_vectorized_matches_scalar(self, rng):
        anchors = np.hstack([rng.uniform(0, 20, (10, 2)), np.zeros((10, 2))])
        anchors[:, 2:] = anchors[:, :2] + rng.uniform(1, 30, (10, 2))
        gts = np.hstack([rng.uniform(0, 20, (10, 2)), np.zeros((10, 2))])
        gts[:, 2:] = gts[:, :2] + rng.uniform(1, 30, (10, 2))
        enc = encode_deltas(anchors, gts)
        dec = decode_deltas(anchors, enc)
        assert np.allclose(dec, gts, atol=1e-9)
        for i in range(10):
            d = encode_delta(BBox(*anchors[i]), BBox(*gts[i]))
            assert np.allclose(enc[i], [d.tx, d.ty, d.tw, d.th])


class TestLabeling:
    def test_identical_anchor_positive(self):
        labels, matched = label_anchors([BBox(0, 0, 10, 10)], [BBox(0, 0, 10, 10)])
        assert labels[0] == LABEL_POSITIVE
        assert matched[0] == 0

    def test_disjoint_negative(self):
        labels, _ = label_anchors([BBox(0, 0, 10, 10)], [BBox(50, 50, 60, 60)])
        assert labels[0] == LABEL_NEGATIVE

    def test_empty_gts_all_negative(self):
        labels, matched = label_anchors([BBox(0, 0, 10, 10), BBox(5, 5, 9, 9)], [])
        assert (labels == LABEL_NEGATIVE).all()
        assert (matched == -1).all()

    def test_argmax_anchor_positive_despite_low_iou(self):
        # best anchor for the gt has IoU 0.4 < pos_thr but is still positive
        anchor = BBox(0, 0, 10, 10)
        gt = BBox(0, 0, 10, 25)  # IoU = 100/250 = 0.4
        assert iou_rect(anchor, gt) == pytest.approx(0.4)
        labels, matched = label_anchors([anchor], [gt], pos_thr=0.7, neg_thr=0.3)
        assert labels[0] == LABEL_POSITIVE
        assert matched[0] == 0

    def test_midband_ignored(self):
        anchor = BBox(0, 0, 10, 10)
        gt = BBox(0, 0, 10, 20)  # IoU 0.5 between 0.3 and 0.7
        other_anchor = BBox(0, 0, 10, 20)  # exact match takes the argmax slot
        labels, _ = label_anchors([anchor, other_anchor], [gt])
        assert labels[0] == LABEL_IGNORE
        assert labels[1] == LABEL_POSITIVE

    def test_every_gt_covered(self, rng):
        anchors = np.hstack([rng.uniform(0, 80, (40, 2)), np.zeros((40, 2))])
        anchors[:, 2:] = anchors[:, :2] + rng.uniform(5, 30, (40, 2))
        gts = np.hstack([rng.uniform(0, 80, (5, 2)), np.zeros((5, 2))])
        gts[:, 2:] = gts[:, :2] + rng.uniform(5, 30, (5, 2))
        labels, matched = label_anchors(anchors, gts)
        from facedet.geometry import iou_matrix

        ious = iou_matrix(anchors, gts)
        for j in range(5):
            if ious[:, j].max() > 0:
                assert any(labels[i] == LABEL_POSITIVE and matched[i] == j
                           for i in range(40) if ious[i, j] == ious[:, j].max())

    def test_threshold_order_enforced(self):
        with pytest.raises(ValueError):
            label_anchors([BBox(0, 0, 1, 1)], [], pos_thr=0.3, neg_thr=0.7)


class TestSelectProposals:
    def test_disjoint_all_kept(self):
        dets = [ScoredRegion(BBox(i * 20, 0, i * 20 + 10, 10), 0.5 + i * 0.01)
                for i in range(5)]
        out = select_proposals(dets, 1000, 0.3, 100)
        assert len(out) == 5

    def test_total_suppression(self):
        dets = [ScoredRegion(BBox(0, 0, 10, 10), 0.001 + i * 0.001) for i in range(300)]
        out = select_proposals(dets, 2000, 0.3, 2000)
        assert len(out) == 1

    def test_post_nms_truncation_and_order(self, rng):
        dets = [ScoredRegion(BBox(i * 30, 0, i * 30 + 10, 10), float(s))
                for i, s in enumerate(rng.uniform(0, 1, 50))]
        out = select_proposals(dets, 50, 0.3, 10)
        assert len(out) == 10
        scores = [d.score for d in out]
        assert scores == sorted(scores, reverse=True)

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            select_proposals([], 10, 0.3, 20)
