import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnseg.errors import ContractError, EvalError, NumericError
from attnseg.evaluate import (
    ConfusionMatrix,
    confusion,
    format_iou_table,
    miou,
    uncertainty_ce,
)
from attnseg.masks import SegMask


def brute_confusion(pred, gt, k, ignore=255):
    """Per-pixel dict counter, the independent oracle."""
    counts = np.zeros((k + 1, k + 1), dtype=np.int64)
    ignored = 0
    for g, p in zip(gt.flat, pred.flat):
        if g == ignore:
            ignored += 1
        else:
            counts[g, p] += 1
    return counts, ignored


def brute_miou(counts):
    ious = {}
    k1 = counts.shape[0]
    for c in range(k1):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        union = tp + fp + fn
        if union > 0:
            ious[c] = tp / union
    return ious, sum(ious.values()) / len(ious)


class TestConfusion:
    def test_identical_masks_are_diagonal(self):
        m = np.array([[0, 1], [2, 1]], dtype=np.uint8)
        cm = confusion(m, m, num_classes=2)
        np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 1]))
        assert cm.ignored_pixels == 0

    def test_fully_ignored_ground_truth(self):
        gt = np.full((3, 3), 255, dtype=np.uint8)
        pred = np.zeros((3, 3), dtype=np.uint8)
        cm = confusion(pred, gt, num_classes=2)
        assert cm.counts.sum() == 0
        assert cm.ignored_pixels == 9

    def test_three_pixel_enumeration(self):
        gt = np.array([[1, 1, 0]], dtype=np.uint8)
        pred = np.array([[1, 0, 0]], dtype=np.uint8)
        cm = confusion(pred, gt, num_classes=1)
        assert cm.counts[1, 1] == 1
        assert cm.counts[1, 0] == 1
        assert cm.counts[0, 0] == 1
        assert cm.counts.sum() == 3

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError, match="shape"):
            confusion(np.zeros((2, 2), np.uint8), np.zeros((3, 2), np.uint8), 1)

    def test_uncertain_prediction_rejected(self):
        pred = np.array([[255]], dtype=np.uint8)
        gt = np.array([[0]], dtype=np.uint8)
        with pytest.raises(ContractError, match="never uncertain"):
            confusion(pred, gt, num_classes=1)

    def test_values_beyond_class_count_rejected(self):
        pred = np.array([[5]], dtype=np.uint8)
        gt = np.array([[1]], dtype=np.uint8)
        with pytest.raises(ContractError, match="exceed"):
            confusion(pred, gt, num_classes=2)

    def test_accepts_segmask_inputs(self):
        m = SegMask(np.ones((2, 2), dtype=np.uint8), legend=(1,))
        cm = confusion(m, m, num_classes=1)
        assert cm.counts[1, 1] == 4

    def test_merge_is_elementwise_addition(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        pred = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        whole = confusion(pred, gt, num_classes=2)
        top = confusion(pred[:5], gt[:5], num_classes=2)
        bottom = confusion(pred[5:], gt[5:], num_classes=2)
        merged = top + bottom
        np.testing.assert_array_equal(merged.counts, whole.counts)
        assert merged.ignored_pixels == whole.ignored_pixels

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 4, size=(12, 12)).astype(np.uint8)
        pred = rng.integers(0, 4, size=(12, 12)).astype(np.uint8)
        perm = np.array([2, 0, 3, 1])
        cm = confusion(pred, gt, num_classes=3)
        cm_perm = confusion(perm[pred], perm[gt], num_classes=3)
        np.testing.assert_array_equal(
            cm_perm.counts, cm.counts[np.ix_(np.argsort(perm), np.argsort(perm))]
        )


class TestMiou:
    def test_identical_masks_score_one(self):
        m = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        per_class, mean = miou(confusion(m, m, num_classes=1))
        assert per_class == {0: 1.0, 1: 1.0}
        assert mean == 1.0

    def test_disjoint_single_class_masks_score_zero(self):
        gt = np.array([[1, 1, 0, 0]], dtype=np.uint8)
        pred = np.array([[0, 0, 1, 1]], dtype=np.uint8)
        per_class, mean = miou(confusion(pred, gt, num_classes=1))
        assert per_class[1] == 0.0
        assert mean == 0.0

    def test_hand_computed_case(self):
        cm = ConfusionMatrix(np.array([[1, 0], [1, 1]]))
        per_class, mean = miou(cm)
        assert per_class == {0: 0.5, 1: 0.5}
        assert mean == 0.5

    def test_zero_union_classes_excluded_from_mean(self):
        counts = np.zeros((4, 4), dtype=np.int64)
        counts[1, 1] = 10
        per_class, mean = miou(ConfusionMatrix(counts))
        assert set(per_class) == {1}
        assert mean == 1.0

    def test_all_zero_union_is_undefined(self):
        with pytest.raises(EvalError):
            miou(ConfusionMatrix(np.zeros((3, 3), dtype=np.int64)))

    def test_background_flag_drops_class_zero_from_mean(self):
        cm = ConfusionMatrix(np.array([[10, 0], [5, 5]]))
        _, with_bg = miou(cm, include_background=True)
        per_class, without = miou(cm, include_background=False)
        assert with_bg == pytest.approx((10 / 15 + 5 / 10) / 2)
        assert without == pytest.approx(0.5)
        assert 0 in per_class  # the map still reports it

    def test_matches_bruteforce_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            k = int(rng.integers(1, 6))
            gt = rng.integers(0, k + 1, size=(9, 9)).astype(np.uint8)
            gt[rng.random((9, 9)) < 0.1] = 255
            pred = rng.integers(0, k + 1, size=(9, 9)).astype(np.uint8)
            cm = confusion(pred, gt, num_classes=k)
            ref_counts, ref_ignored = brute_confusion(pred, gt, k)
            np.testing.assert_array_equal(cm.counts, ref_counts)
            assert cm.ignored_pixels == ref_ignored
            if ref_counts.sum() == 0:
                continue
            per_class, mean = miou(cm)
            ref_ious, ref_mean = brute_miou(ref_counts)
            assert per_class == pytest.approx(ref_ious)
            assert mean == pytest.approx(ref_mean)

    def test_table_formatting(self):
        text = format_iou_table({0: 0.5, 2: 0.75}, 0.625, {2: "dog"})
        assert "background" in text
        assert "dog" in text
        assert "62.5" in text


class TestUncertaintyCE:
    def test_all_uncertain_pixels_zero_loss_and_gradient(self):
        logits = np.random.default_rng(0).normal(size=(3, 3, 4))
        target = np.full((3, 3), 255, dtype=np.uint8)
        rep = uncertainty_ce(logits, target)
        assert rep.loss == 0.0
        np.testing.assert_array_equal(rep.gradient, 0.0)
        assert rep.counted_pixels == 0

    def test_uniform_logits_closed_form(self):
        logits = np.zeros((1, 1, 3))
        target = np.array([[1]], dtype=np.uint8)
        rep = uncertainty_ce(logits, target)
        assert rep.loss == pytest.approx(np.log(3))
        np.testing.assert_allclose(
            rep.gradient[0, 0], [1 / 3, 1 / 3 - 1, 1 / 3], atol=1e-12
        )
        assert rep.counted_pixels == 1

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(4, 4, 3))
        target = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)
        target[0, 0] = 255
        rep = uncertainty_ce(logits, target)
        eps = 1e-3
        fd = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            up = logits.copy()
            up[idx] += eps
            down = logits.copy()
            down[idx] -= eps
            fd[idx] = (
                uncertainty_ce(up, target).loss - uncertainty_ce(down, target).loss
            ) / (2 * eps)
        rel = np.abs(rep.gradient - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert rel <= 1e-4

    def test_gradient_exactly_zero_at_uncertain_pixels(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(5, 5, 4))
        target = rng.integers(0, 4, size=(5, 5)).astype(np.uint8)
        target[1, 2] = 255
        target[4, 4] = 255
        rep = uncertainty_ce(logits, target)
        np.testing.assert_array_equal(rep.gradient[1, 2], 0.0)
        np.testing.assert_array_equal(rep.gradient[4, 4], 0.0)

    def test_loss_invariant_to_per_pixel_logit_shift(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 4, 5))
        target = rng.integers(0, 5, size=(4, 4)).astype(np.uint8)
        shift = rng.normal(size=(4, 4, 1)) * 50
        a = uncertainty_ce(logits, target).loss
        b = uncertainty_ce(logits + shift, target).loss
        assert a == pytest.approx(b, rel=1e-9)

    def test_mean_reduction_scales_by_counted(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(2, 3, 4))
        target = rng.integers(0, 4, size=(2, 3)).astype(np.uint8)
        target[0, 0] = 255
        total = uncertainty_ce(logits, target, reduction="sum")
        mean = uncertainty_ce(logits, target, reduction="mean")
        assert mean.counted_pixels == 5
        assert mean.loss == pytest.approx(total.loss / 5)
        np.testing.assert_allclose(mean.gradient, total.gradient / 5)

    def test_non_finite_logits_rejected(self):
        logits = np.zeros((1, 1, 2))
        logits[0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            uncertainty_ce(logits, np.zeros((1, 1), dtype=np.uint8))

    def test_bad_label_rejected(self):
        logits = np.zeros((1, 1, 2))
        with pytest.raises(ContractError):
            uncertainty_ce(logits, np.array([[7]], dtype=np.uint8))

    def test_segmask_target_accepted(self):
        logits = np.zeros((2, 2, 3))
        mask = SegMask(np.ones((2, 2), dtype=np.uint8), legend=(1,))
        rep = uncertainty_ce(logits, mask)
        assert rep.counted_pixels == 4

    @settings(deadline=None, max_examples=25)
    @given(seed=st.integers(0, 10_000))
    def test_loss_nonnegative_and_grad_rows_sum_to_zero(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(3, 3, 4)) * 3
        target = rng.integers(0, 4, size=(3, 3)).astype(np.uint8)
        rep = uncertainty_ce(logits, target)
        assert rep.loss >= 0.0
        # softmax minus onehot sums to zero per counted pixel
        np.testing.assert_allclose(rep.gradient.sum(axis=2), 0.0, atol=1e-12)
