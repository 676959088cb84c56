"""Metric correctness against brute-force oracles and hand arithmetic."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadeseg.metrics import (
    REGION_ORDER,
    boundary_voxels,
    dice,
    evaluate_cohort,
    hausdorff,
    merge_labels,
    sensitivity_specificity,
)


def hausdorff_oracle(a, b):
    """All-pairs O(n^2) distances over boundary voxels."""
    pa = np.argwhere(boundary_voxels(a)).astype(float)
    pb = np.argwhere(boundary_voxels(b)).astype(float)
    if pa.size == 0 or pb.size == 0:
        return None
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


class TestMergeLabels:
    def test_reference_example(self):
        seg = np.array([0, 1, 2, 4], dtype=np.uint8).reshape(1, 1, 4)
        regions = merge_labels(seg)
        np.testing.assert_array_equal(regions["WT"].ravel(), [0, 1, 1, 1])
        np.testing.assert_array_equal(regions["TC"].ravel(), [0, 1, 0, 1])
        np.testing.assert_array_equal(regions["ET"].ravel(), [0, 0, 0, 1])

    def test_all_zero(self):
        regions = merge_labels(np.zeros((2, 2, 2), dtype=np.uint8))
        for mask in regions.values():
            assert mask.sum() == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_nesting_everywhere(self, seed):
        seg = np.random.default_rng(seed).choice([0, 1, 2, 4], size=(4, 4, 4)).astype(np.uint8)
        regions = merge_labels(seg)
        assert (regions["ET"] <= regions["TC"]).all()
        assert (regions["TC"] <= regions["WT"]).all()

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError, match="unknown label"):
            merge_labels(np.array([[[3]]], dtype=np.uint8))


class TestDice:
    def test_identical(self):
        m = np.zeros((3, 3, 3), dtype=np.uint8)
        m[1] = 1
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((3, 3, 3), dtype=np.uint8)
        b = np.zeros((3, 3, 3), dtype=np.uint8)
        a[0], b[2] = 1, 1
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((1, 1, 4), dtype=np.uint8)
        b = np.zeros((1, 1, 4), dtype=np.uint8)
        a[0, 0, :2] = 1
        b[0, 0, 1:3] = 1
        assert dice(a, b) == 0.5

    def test_both_empty_is_one(self):
        z = np.zeros((2, 2, 2), dtype=np.uint8)
        assert dice(z, z) == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.random((4, 4, 4)) > 0.6).astype(np.uint8)
        b = (rng.random((4, 4, 4)) > 0.6).astype(np.uint8)
        assert dice(a, b) == dice(b, a)


class TestHausdorff:
    def test_identical_zero(self):
        m = np.zeros((4, 4, 4), dtype=np.uint8)
        m[1:3, 1:3, 1:3] = 1
        assert hausdorff(m, m) == 0.0

    def test_singletons_three_apart(self):
        a = np.zeros((8, 8, 8), dtype=np.uint8)
        b = np.zeros((8, 8, 8), dtype=np.uint8)
        a[2, 2, 2] = 1
        b[2, 2, 5] = 1
        assert hausdorff(a, b) == 3.0

    def test_spacing_scales(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        b = np.zeros((4, 4, 4), dtype=np.uint8)
        a[1, 1, 1] = 1
        b[1, 1, 2] = 1
        assert hausdorff(a, b, spacing=(1.0, 1.0, 2.5)) == 2.5

    def test_empty_is_undefined(self):
        m = np.zeros((3, 3, 3), dtype=np.uint8)
        n = m.copy()
        n[1, 1, 1] = 1
        assert hausdorff(m, n) is None
        assert hausdorff(n, m) is None

    def test_matches_bruteforce_oracle_on_random_masks(self):
        rng = np.random.default_rng(101)
        for _ in range(50):
            a = (rng.random((6, 6, 6)) > 0.8).astype(np.uint8)
            b = (rng.random((6, 6, 6)) > 0.8).astype(np.uint8)
            expected = hausdorff_oracle(a, b)
            actual = hausdorff(a, b)
            if expected is None:
                assert actual is None
            else:
                assert actual == pytest.approx(expected, abs=0)

    def test_symmetry(self):
        rng = np.random.default_rng(103)
        a = (rng.random((5, 5, 5)) > 0.7).astype(np.uint8)
        b = (rng.random((5, 5, 5)) > 0.7).astype(np.uint8)
        if a.any() and b.any():
            assert hausdorff(a, b) == hausdorff(b, a)

    def test_boundary_excludes_interior(self):
        m = np.zeros((5, 5, 5), dtype=np.uint8)
        m[1:4, 1:4, 1:4] = 1
        boundary = boundary_voxels(m)
        assert not boundary[2, 2, 2]  # fully surrounded center
        assert boundary.sum() == 26  # 27-voxel cube minus its center


class TestSensitivitySpecificity:
    def test_perfect(self):
        rng = np.random.default_rng(107)
        gt = (rng.random((4, 4, 4)) > 0.5).astype(np.uint8)
        sens, spec = sensitivity_specificity(gt, gt)
        assert sens == 1.0 and spec == 1.0

    def test_total_inversion(self):
        rng = np.random.default_rng(109)
        gt = (rng.random((4, 4, 4)) > 0.5).astype(np.uint8)
        sens, spec = sensitivity_specificity(1 - gt, gt)
        assert sens == 0.0 and spec == 0.0

    def test_constructed_confusion_matrix(self):
        # TP=3, FN=1, TN=10, FP=2 in a 16-voxel volume
        gt = np.zeros((1, 4, 4), dtype=np.uint8)
        pred = np.zeros((1, 4, 4), dtype=np.uint8)
        gt[0, 0, :4] = 1           # 4 positives
        pred[0, 0, :3] = 1         # 3 true positives, 1 missed
        pred[0, 1, :2] = 1         # 2 false positives
        sens, spec = sensitivity_specificity(pred, gt)
        assert sens == pytest.approx(0.75)
        assert spec == pytest.approx(10 / 12)

    def test_undefined_flags(self):
        zeros = np.zeros((2, 2, 2), dtype=np.uint8)
        ones = np.ones((2, 2, 2), dtype=np.uint8)
        sens, spec = sensitivity_specificity(zeros, zeros)
        assert sens is None and spec is not None
        sens, spec = sensitivity_specificity(ones, ones)
        assert sens is not None and spec is None

    def test_domain_restriction(self):
        gt = np.zeros((2, 2, 2), dtype=np.uint8)
        pred = np.ones((2, 2, 2), dtype=np.uint8)
        domain = np.zeros((2, 2, 2), dtype=np.uint8)
        domain[0] = 1
        gt[0] = 1
        sens, spec = sensitivity_specificity(pred, gt, eval_domain=domain)
        assert sens == 1.0 and spec is None  # no negatives inside the domain


class TestEvaluateCohort:
    def make_labels(self, seed):
        return np.random.default_rng(seed).choice(
            [0, 1, 2, 4], size=(6, 6, 6), p=[0.7, 0.1, 0.1, 0.1]).astype(np.uint8)

    def test_perfect_cohort(self):
        seg = self.make_labels(0)
        report = evaluate_cohort([(seg, seg), (seg, seg)])
        for row in report.rows:
            assert row.dice == 1.0
            assert row.hausdorff == 0.0
        for region in REGION_ORDER:
            assert report.means[region].dice == 1.0
            assert report.means[region].hausdorff == 0.0

    def test_single_pair_mean_equals_row(self):
        pred, gt = self.make_labels(1), self.make_labels(2)
        report = evaluate_cohort([(pred, gt)])
        for region in REGION_ORDER:
            row = next(r for r in report.rows if r.region == region)
            assert report.means[region].dice == pytest.approx(row.dice)

    def test_two_pair_mean_is_hand_average(self):
        pairs = [(self.make_labels(3), self.make_labels(4)),
                 (self.make_labels(5), self.make_labels(6))]
        report = evaluate_cohort(pairs)
        for region in REGION_ORDER:
            rows = [r for r in report.rows if r.region == region]
            assert report.means[region].dice == pytest.approx(
                (rows[0].dice + rows[1].dice) / 2)

    def test_order_independence(self):
        pairs = [(self.make_labels(7), self.make_labels(8)),
                 (self.make_labels(9), self.make_labels(10))]
        fwd = evaluate_cohort(pairs, subjects=["a", "b"])
        rev = evaluate_cohort(pairs[::-1], subjects=["b", "a"])
        for region in REGION_ORDER:
            assert fwd.means[region].dice == pytest.approx(rev.means[region].dice)

    def test_undefined_excluded_and_counted(self):
        gt_with_et = self.make_labels(11)
        gt_no_et = gt_with_et.copy()
        gt_no_et[gt_no_et == 4] = 1  # remove enhancing tumor entirely
        report = evaluate_cohort([(gt_no_et, gt_no_et), (gt_with_et, gt_with_et)])
        assert report.means["ET"].excluded["hausdorff"] == 1
        assert report.means["ET"].hausdorff == 0.0  # from the defined pair only

    def test_records_format(self):
        seg = self.make_labels(12)
        report = evaluate_cohort([(seg, seg)], subjects=["subj-1"])
        text = report.to_records()
        lines = text.strip().split("\n")
        assert lines[0] == "subject,region,dice,hausdorff,sensitivity,specificity"
        # ET, WT, TC row order per scan, then the three mean rows
        assert [ln.split(",")[1] for ln in lines[1:4]] == ["ET", "WT", "TC"]
        assert [ln.split(",")[0] for ln in lines[4:]] == ["mean"] * 3
        table = report.to_table()
        assert "subject" in table and "mean" in table
