import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import interpolated_ap
from thinmask.core import BBox, BinaryMask, Instance
from thinmask.dataset import Annotation, Dataset, ImageRecord
from thinmask.evaluation import average_precision, evaluate, grouped_ap, match_detections
from thinmask.tta import Detection


def box_inst(cat, x, y, w, h, size=64):
    bits = np.zeros((size, size), dtype=bool)
    bits[y : y + h, x : x + w] = True
    return Instance(cat, BBox(x, y, w, h), BinaryMask(bits))


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision([True], 1) == 1.0

    def test_no_detections(self):
        assert average_precision([], 3) == 0.0

    def test_tp_then_fp(self):
        assert average_precision([True, False], 1) == 1.0

    def test_fp_then_tp(self):
        assert average_precision([False, True], 1) == 0.5

    def test_half_recall(self):
        assert average_precision([True], 2) == pytest.approx(51 / 101)

    def test_nothing_to_evaluate(self):
        assert average_precision([], 0) is None
        assert average_precision([False], 0) == 0.0

    @given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
    def test_matches_oracle(self, flags, extra):
        num_gt = sum(flags) + extra
        got = average_precision(flags, num_gt)
        want = interpolated_ap(flags, num_gt)
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-12)

    @given(st.lists(st.booleans(), max_size=30), st.integers(0, 5))
    def test_trailing_fp_never_helps(self, flags, extra):
        num_gt = sum(flags) + extra
        if num_gt == 0:
            return
        assert average_precision(flags + [False], num_gt) <= average_precision(flags, num_gt)

    @given(st.lists(st.booleans(), max_size=30), st.integers(1, 5))
    def test_bounded(self, flags, extra):
        ap = average_precision(flags, sum(flags) + extra)
        assert 0.0 <= ap <= 1.0


class TestMatching:
    def test_greedy_by_score(self):
        gts = [box_inst(0, 0, 0, 10, 10)]
        dets = [Detection(BBox(0, 0, 10, 10), 0.5, 0), Detection(BBox(0, 0, 10, 9), 0.9, 0)]
        m = match_detections(dets, gts)
        assert [x.det_index for x in m] == [1, 0]
        assert [x.is_tp for x in m] == [True, False]

    def test_category_must_agree(self):
        m = match_detections([Detection(BBox(0, 0, 10, 10), 0.9, 1)], [box_inst(0, 0, 0, 10, 10)])
        assert not m[0].is_tp

    def test_mask_iou_used(self):
        gt = box_inst(0, 0, 0, 10, 10)
        # box matches perfectly but the mask only covers a fifth of it
        bits = np.zeros((64, 64), dtype=bool)
        bits[0:2, 0:10] = True
        det = Detection(BBox(0, 0, 10, 10), 0.9, 0, mask=BinaryMask(bits))
        assert not match_detections([det], [gt])[0].is_tp


class TestGrouped:
    def test_fixture(self):
        res = grouped_ap({1: 0.2, 2: 0.8, 3: 0.6}, {1: "rare", 2: "frequent", 3: "frequent"})
        assert res.ap_r == pytest.approx(0.2)
        assert res.ap_f == pytest.approx(0.7)
        assert res.ap == pytest.approx(1.6 / 3)
        assert res.ap_c is None
        assert res.summary_csv().splitlines()[1].split(",")[2] == ""

    def test_skips_none(self):
        res = grouped_ap({1: None, 2: 0.5}, {1: "rare", 2: "common"})
        assert res.ap == 0.5 and res.ap_r is None

    def test_missing_bucket(self):
        with pytest.raises(ValueError):
            grouped_ap({1: 0.5}, {})


class TestEvaluate:
    def _dataset(self):
        a = box_inst(0, 0, 0, 10, 10)
        b = box_inst(1, 20, 20, 8, 8)
        c = box_inst(0, 30, 30, 12, 12)
        images = [
            ImageRecord(0, 64, 64, [Annotation(0, 0, a), Annotation(1, 0, b)]),
            ImageRecord(1, 64, 64, [Annotation(2, 1, c)]),
        ]
        return Dataset(images, {0: "x", 1: "y"})

    def test_perfect(self):
        ds = self._dataset()
        dets = [Detection(ann.instance.bbox, 0.9, ann.category_id, image_id=ann.image_id) for ann in ds.annotations()]
        res = evaluate(ds, dets, {0: "frequent", 1: "rare"}, threads=2)
        assert res.ap == 1.0 and res.ap_r == 1.0 and res.ap_f == 1.0
        assert res.matched == 3 and res.unmatched_dets == 0

    def test_partial(self):
        ds = self._dataset()
        dets = [
            Detection(BBox(0, 0, 10, 10), 0.9, 0, image_id=0),
            Detection(BBox(50, 50, 5, 5), 0.8, 0, image_id=1),
        ]
        res = evaluate(ds, dets, {0: "frequent", 1: "rare"})
        # category 0: [TP, FP] over 2 GT; category 1: no detections
        assert res.per_category[0] == pytest.approx(interpolated_ap([True, False], 2))
        assert res.per_category[1] == 0.0
        assert res.unmatched_gts == 2

    def test_unknown_image(self):
        with pytest.raises(ValueError):
            evaluate(self._dataset(), [Detection(BBox(0, 0, 1, 1), 0.5, 0, image_id=9)], {})

    def test_coco_thresholds_average(self):
        ds = self._dataset()
        # IoU 0.8 with the first GT: counts at 0.5..0.8, misses at 0.85..0.95
        dets = [Detection(BBox(0, 0, 10, 8), 0.9, 0, image_id=0)]
        res = evaluate(ds, dets, {0: "rare", 1: "rare"}, iou_thresholds=(0.5, 0.8, 0.9))
        single = interpolated_ap([True], 2)
        assert res.per_category[0] == pytest.approx(2 * single / 3)
