"""
Tests for confusion tallies, mIoU, the mIoU ratio Q and the fooling rate.
"""

import numpy as np
import pytest

from _MetricsMS.metrics import ConfusionMatrix, MetricsMS
from _TensorCoreMS.tensor_core import NumericalError, ShapeError
from tests.conftest import LinearHead


class TestConfusion:
    """Per-pixel tallies, ignore class and merging."""

    def test_single_class_tally(self):
        mask = np.full((2, 4), 3)
        cm = MetricsMS.confusion(mask, mask, num_classes=8)
        expected = np.zeros((8, 8), dtype=np.int64)
        expected[3, 3] = 8
        np.testing.assert_array_equal(cm.counts, expected)

    def test_rows_are_truth_columns_are_prediction(self):
        cm = MetricsMS.confusion(np.array([1]), np.array([0]), num_classes=2)
        assert cm.counts[0, 1] == 1 and cm.total == 1

    def test_all_pixels_ignored_leaves_matrix_unchanged(self):
        start = MetricsMS.confusion(np.array([0, 1]), np.array([0, 1]), 3)
        after = MetricsMS.accumulate(start, np.array([2, 0, 1]), np.array([2, 2, 2]), ignore_class=2)
        assert after == start

    def test_ignored_pixels_do_not_count(self):
        cm = MetricsMS.confusion(np.array([0, 1, 1]), np.array([0, 2, 1]), 3, ignore_class=2)
        assert cm.total == 2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            MetricsMS.confusion(np.zeros((2, 2)), np.zeros((2, 3)), 2)

    def test_out_of_range_ids(self):
        with pytest.raises(ValueError):
            MetricsMS.confusion(np.array([5]), np.array([0]), 2)

    def test_merge_adds_counts(self):
        a = MetricsMS.confusion(np.array([0, 1]), np.array([0, 0]), 2)
        b = MetricsMS.confusion(np.array([1]), np.array([1]), 2)
        merged = MetricsMS.merge([a, b])
        np.testing.assert_array_equal(merged.counts, [[1, 1], [0, 1]])
        assert a.total == 2  # inputs untouched

    def test_merge_of_nothing(self):
        with pytest.raises(ValueError):
            MetricsMS.merge([])

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2, [[1, -1], [0, 0]])

    def test_matches_pixel_loop_on_random_masks(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            h, w = rng.integers(1, 9, size=2)
            pred, truth = rng.integers(0, 5, size=(2, h, w))
            expected = np.zeros((5, 5), dtype=np.int64)
            for p, t in zip(pred.reshape(-1), truth.reshape(-1)):
                expected[t, p] += 1
            np.testing.assert_array_equal(MetricsMS.confusion(pred, truth, 5).counts, expected)

    def test_accumulate_is_additive(self):
        rng = np.random.default_rng(12)
        a_pred, a_truth, b_pred, b_truth = rng.integers(0, 6, size=(4, 7, 9))
        chained = MetricsMS.accumulate(MetricsMS.confusion(a_pred, a_truth, 6), b_pred, b_truth)
        assert chained == MetricsMS.confusion(a_pred, a_truth, 6) + MetricsMS.confusion(b_pred, b_truth, 6)


class TestMiou:
    """Mean IoU over present classes."""

    def test_hand_example(self):
        cm = MetricsMS.confusion(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
        np.testing.assert_allclose(cm.class_iou(), [0.5, 2.0 / 3.0])
        assert MetricsMS.miou(cm) == pytest.approx(7.0 / 12.0, abs=1e-12)

    def test_perfect_prediction(self):
        mask = np.random.default_rng(0).integers(0, 8, size=(16, 32))
        assert MetricsMS.miou(MetricsMS.confusion(mask, mask, 8)) == 1.0

    def test_disjoint_prediction(self):
        truth = np.array([[0, 0], [1, 1]])
        assert MetricsMS.miou(MetricsMS.confusion(1 - truth, truth, 2)) == 0.0

    def test_absent_classes_are_skipped(self):
        cm = MetricsMS.confusion(np.array([2, 2]), np.array([2, 2]), 8)
        iou = cm.class_iou()
        assert np.isnan(iou[0]) and iou[2] == 1.0
        assert MetricsMS.miou(cm) == 1.0

    def test_empty_matrix_is_undefined(self):
        with pytest.raises(NumericalError):
            MetricsMS.miou(ConfusionMatrix(4))

    def test_class_permutation_leaves_miou_unchanged(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            pred, truth = rng.integers(0, 8, size=(2, 12, 12))
            perm = rng.permutation(8)
            base = MetricsMS.confusion(pred, truth, 8)
            permuted = MetricsMS.confusion(perm[pred], perm[truth], 8)
            assert abs(MetricsMS.miou(permuted) - MetricsMS.miou(base)) <= 1e-12
            np.testing.assert_allclose(permuted.class_iou()[perm], base.class_iou(), rtol=0, atol=1e-12)


class TestMiouRatio:
    """Q = mIoU_adv / mIoU_clean."""

    @pytest.mark.parametrize("adv,expected", [(4.6, 0.0683), (57.6, 0.8559)])
    def test_reported_ratios(self, adv, expected):
        assert MetricsMS.miou_ratio(adv, 67.3) == pytest.approx(adv / 67.3, abs=1e-15)
        assert MetricsMS.miou_ratio(adv, 67.3) == pytest.approx(expected, abs=1e-4)

    def test_equal_means_one(self):
        assert MetricsMS.miou_ratio(0.42, 0.42) == 1.0

    def test_zero_clean_rejected(self):
        with pytest.raises(ValueError):
            MetricsMS.miou_ratio(0.1, 0.0)


class TestFoolingRate:
    """Fraction of image-level labels changed by a perturbation."""

    HEAD = LinearHead(np.eye(2), np.zeros(2))
    IMAGES = [np.array([10.0, 0.0]), np.array([12.0, 0.0])]

    def test_zero_perturbation(self):
        assert MetricsMS.fooling_rate(self.HEAD, self.IMAGES, np.zeros(2)) == 0.0

    def test_every_label_flipped(self):
        assert MetricsMS.fooling_rate(self.HEAD, self.IMAGES, np.array([-10.0, 10.0])) == 1.0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            MetricsMS.fooling_rate(self.HEAD, [], np.zeros(2))

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(14)
        head = LinearHead(rng.normal(size=(3, 2, 2, 3)), rng.normal(size=3))
        images = [rng.integers(0, 256, size=(2, 2, 3)).astype(np.uint8) for _ in range(40)]
        r = rng.uniform(-60.0, 60.0, size=(2, 2, 3))
        flips = 0
        for x in images:
            adv = np.floor(np.clip(x.astype(np.float64) + r, 0.0, 255.0) + 0.5)
            flips += int(np.argmax(head.logits(adv)) != np.argmax(head.logits(x.astype(np.float64))))
        assert MetricsMS.fooling_rate(head, images, r) == flips / len(images)
