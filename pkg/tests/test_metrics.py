import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rapidseg.grid import DimensionError
from rapidseg.metrics import (
    GroundTruth, boundary_map, boundary_recall, roi_precision_f1, under_segmentation_error,
)


def halves(h, w, edge):
    g = np.zeros((h, w), np.int32)
    g[:, edge:] = 1
    return g


class TestUnderSegmentation:
    def test_identical(self):
        gt = halves(4, 4, 2)
        assert under_segmentation_error(gt, gt) == 0

    def test_single_superpixel_over_halves(self):
        gt = halves(4, 4, 2)
        lm = np.zeros((4, 4), np.int32)
        assert under_segmentation_error(lm, gt) == 1.0
        assert under_segmentation_error(lm, gt) == oracles.ue_sets(lm, gt)

    def test_small_leak(self):
        gt = halves(6, 6, 3)
        lm = halves(6, 6, 3)
        lm[0:2, 3] = 0  # superpixel 0 leaks k=2 pixels into segment 1
        assert under_segmentation_error(lm, gt) == pytest.approx(2 * 2 / 36)
        assert under_segmentation_error(lm, gt) == oracles.ue_sets(lm, gt)

    def test_classic(self):
        gt = halves(6, 6, 3)
        lm = halves(6, 6, 3)
        lm[0:2, 3] = 0
        # sp 0 (20 px) overlaps both segments: 20 + 20 + 16 - 36
        assert under_segmentation_error(lm, gt, classic=True) == pytest.approx(20 / 36)

    def test_dims(self):
        with pytest.raises(DimensionError, match=r"\(2, 2\).*\(3, 2\)"):
            under_segmentation_error(np.zeros((2, 2)), np.zeros((3, 2)))


class TestBoundaryRecall:
    def test_identical(self):
        gt = halves(8, 8, 4)
        assert boundary_recall(gt, gt, 0) == 1.0

    def test_single_superpixel(self):
        assert boundary_recall(np.zeros((8, 8), int), halves(8, 8, 4), 2) == 0.0

    def test_displaced_cut(self):
        gt, lm = halves(8, 8, 4), halves(8, 8, 5)
        assert boundary_recall(lm, gt, 2) == 1.0
        assert boundary_recall(lm, gt, 1) == 1.0
        # boundary pixels are two-sided: GT columns 3,4 vs superpixel columns 4,5
        assert boundary_recall(lm, gt, 0) == 0.5
        assert boundary_recall(lm, gt, 0) == oracles.br_sets(lm, gt, 0)

    def test_no_gt_boundary(self):
        assert boundary_recall(halves(4, 4, 2), np.zeros((4, 4), int), 0) == 1.0

    def test_boundary_map(self):
        assert boundary_map(np.array([[0, 0, 1]])).tolist() == [[False, True, True]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_in_eps(self, seed):
        rng = np.random.default_rng(seed)
        lm, gt = rng.integers(0, 3, (6, 7)), rng.integers(0, 2, (6, 7))
        vals = [boundary_recall(lm, gt, e) for e in range(4)]
        assert vals == sorted(vals) and all(0 <= v <= 1 for v in vals)


class TestDetection:
    def test_perfect(self):
        gt = halves(4, 4, 2).astype(bool)
        d = roi_precision_f1(gt, gt)
        assert (d.precision, d.recall, d.f1) == (1, 1, 1)

    def test_all_positive(self):
        d = roi_precision_f1(np.ones((4, 4), bool), halves(4, 4, 2).astype(bool))
        assert (d.precision, d.recall) == (0.5, 1.0) and d.f1 == pytest.approx(2 / 3)

    def test_all_negative(self):
        d = roi_precision_f1(np.zeros((4, 4), bool), halves(4, 4, 2).astype(bool))
        assert d.precision is None and d.recall == 0.0 and d.f1 == 0.0

    def test_empty_gt(self):
        d = roi_precision_f1(np.ones((2, 2), bool), np.zeros((2, 2), bool))
        assert d.recall is None and d.precision == 0.0 and d.f1 == 0.0


class TestGroundTruth:
    def test_mask_detection(self):
        g = GroundTruth.from_array(np.array([[0, 255], [255, 0]], np.uint8))
        assert g.is_mask and g.labels.tolist() == [[0, 1], [1, 0]]

    def test_segments_dense(self):
        g = GroundTruth.from_array(np.array([[3, 9], [9, 40]], np.uint8))
        assert not g.is_mask and g.labels.tolist() == [[0, 1], [1, 2]]

    def test_forced_kind(self):
        assert not GroundTruth.from_array(np.array([[0, 255]], np.uint8), "segments").is_mask


class TestRanges:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_ranges_and_zero_iff_contained(self, seed):
        rng = np.random.default_rng(seed)
        lm, gt = rng.integers(0, 4, (5, 5)), rng.integers(0, 3, (5, 5))
        ue = under_segmentation_error(lm, gt)
        assert 0 <= ue <= 1
        contained = all(len(np.unique(gt[lm == s])) == 1 for s in np.unique(lm))
        assert (ue == 0) == contained
        d = roi_precision_f1(lm > 1, gt > 0)
        for v in (d.precision, d.recall, d.f1):
            assert v is None or 0 <= v <= 1
