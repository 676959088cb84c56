"""ROI masking and loss algebra, including the gradient-blocking contract."""

import numpy as np
import pytest

from cascadeseg.autodiff import ConvKernel, ShapeError, Tensor, conv3d, slice_channels, softmax_channels
from cascadeseg.gradcheck import check_gradients
from cascadeseg.losses import (
    REGIONS,
    RegionSpec,
    apply_roi_mask,
    combined_loss,
    cross_entropy,
    dice_loss_binary,
    dice_ratio,
    soft_dice_region,
)


def softmax_probs(rng, channels, dims, requires_grad=False):
    logits = Tensor(rng.normal(size=(1, channels) + dims), requires_grad=requires_grad)
    return softmax_channels(logits), logits


def one_hot_probs(labels, channel_labels=(0, 1, 2, 4)):
    probs = np.zeros((1, len(channel_labels)) + labels.shape)
    for ch, value in enumerate(channel_labels):
        probs[0, ch] = labels == value
    return Tensor(probs)


class TestApplyRoiMask:
    def test_all_ones_mask_is_noop(self):
        rng = np.random.default_rng(0)
        probs, _ = softmax_probs(rng, 2, (3, 3, 3))
        out = apply_roi_mask(probs, np.ones((3, 3, 3), dtype=np.uint8))
        np.testing.assert_array_equal(out.data, probs.data)

    def test_all_zeros_mask_forces_background_and_blocks(self):
        rng = np.random.default_rng(1)
        probs, logits = softmax_probs(rng, 4, (2, 2, 2), requires_grad=True)
        out = apply_roi_mask(probs, np.zeros((2, 2, 2), dtype=np.uint8))
        np.testing.assert_array_equal(out.data[0, 0], 1.0)
        np.testing.assert_array_equal(out.data[0, 1:], 0.0)
        out.sum().backward()
        assert logits.grad is not None
        np.testing.assert_array_equal(logits.grad, 0.0)  # bitwise zero

    def test_half_split_mask(self):
        rng = np.random.default_rng(2)
        probs, _ = softmax_probs(rng, 3, (2, 2, 2))
        mask = np.zeros((2, 2, 2), dtype=np.uint8)
        mask[0] = 1
        out = apply_roi_mask(probs, mask)
        np.testing.assert_array_equal(out.data[:, :, 0], probs.data[:, :, 0])
        np.testing.assert_array_equal(out.data[0, 0, 1], 1.0)
        np.testing.assert_array_equal(out.data[0, 1:, 1], 0.0)

    def test_non_binary_mask_rejected(self):
        rng = np.random.default_rng(3)
        probs, _ = softmax_probs(rng, 2, (2, 2, 2))
        with pytest.raises(ValueError, match="binary"):
            apply_roi_mask(probs, np.full((2, 2, 2), 0.5))

    def test_gradients_blocked_only_outside(self):
        rng = np.random.default_rng(4)
        probs, logits = softmax_probs(rng, 2, (2, 2, 2), requires_grad=True)
        mask = np.zeros((2, 2, 2), dtype=np.uint8)
        mask[1] = 1
        out = apply_roi_mask(probs, mask)
        (out * Tensor(rng.normal(size=out.data.shape))).sum().backward()
        np.testing.assert_array_equal(logits.grad[:, :, 0], 0.0)
        assert np.abs(logits.grad[:, :, 1]).max() > 0


class TestDiceBinary:
    def test_ratio_perfect_overlap_is_half(self):
        labels = np.array([1, 1, 0, 1], dtype=np.uint8).reshape(1, 1, 1, 1, 4)
        probs = Tensor(labels.astype(np.float64))
        roi = np.ones((1, 1, 4), dtype=np.uint8)
        r = dice_ratio(probs, labels[0, 0], roi)
        assert abs(r.item() - 0.5) < 1e-12

    def test_ratio_disjoint_is_zero(self):
        labels = np.array([0, 0, 1, 1], dtype=np.uint8).reshape(1, 1, 4)
        probs = Tensor(np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 1, 1, 1, 4))
        r = dice_ratio(probs, labels, np.ones_like(labels))
        assert abs(r.item()) < 1e-12

    def test_ratio_uniform_half_single_positive(self):
        labels = np.array([1, 0, 0, 0], dtype=np.uint8).reshape(1, 1, 4)
        probs = Tensor(np.full((1, 1, 1, 1, 4), 0.5))
        r = dice_ratio(probs, labels, np.ones_like(labels))
        assert abs(r.item() - 1.0 / 6.0) < 1e-12

    def test_loss_values(self):
        labels = np.array([1, 0, 0, 0], dtype=np.uint8).reshape(1, 1, 4)
        roi = np.ones_like(labels)
        probs = Tensor(np.full((1, 1, 1, 1, 4), 0.5))
        loss = dice_loss_binary(probs, labels, roi)
        assert loss.item() == pytest.approx(2.0 / 3.0, abs=1e-4)
        perfect = Tensor(labels.astype(np.float64).reshape(1, 1, 1, 1, 4))
        assert dice_loss_binary(perfect, labels, roi).item() == pytest.approx(0.0, abs=1e-5)
        disjoint = Tensor(np.array([0.0, 1.0, 1.0, 1.0]).reshape(1, 1, 1, 1, 4))
        assert dice_loss_binary(disjoint, labels, roi).item() == pytest.approx(1.0, abs=1e-4)

    def test_empty_empty_is_zero_loss(self):
        labels = np.zeros((2, 2, 2), dtype=np.uint8)
        probs = Tensor(np.zeros((1, 1, 2, 2, 2)))
        loss = dice_loss_binary(probs, labels, np.ones_like(labels))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
        labels = (rng.random((2, 2, 2)) > 0.5).astype(np.uint8)
        roi = np.ones_like(labels)

        def loss():
            probs = softmax_channels(logits)
            return dice_loss_binary(slice_channels(probs, 1, 2), labels, roi)

        loss().backward()
        report = check_gradients(loss, [("logits", logits)], step=1e-3, tolerance=1e-4)
        assert report.ok(1e-4), report.failures[:3]

    def test_monotone_in_true_tumor_probability(self):
        # raising p at a true-tumor voxel (softmax renormalized) never hurts
        labels = np.zeros((1, 1, 4), dtype=np.uint8)
        labels[0, 0, 1] = 1
        roi = np.ones_like(labels)
        losses = []
        for bump in np.linspace(-2.0, 2.0, 9):
            logits = np.zeros((1, 2, 1, 1, 4))
            logits[0, 1, 0, 0, 1] = bump
            probs = softmax_channels(Tensor(logits))
            losses.append(dice_loss_binary(slice_channels(probs, 1, 2), labels, roi).item())
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        p = rng.random((1, 1, 2, 2, 2))
        labels = (rng.random((2, 2, 2)) > 0.5).astype(np.uint8)
        roi = (rng.random((2, 2, 2)) > 0.3).astype(np.uint8)
        base = dice_loss_binary(Tensor(p), labels, roi).item()
        perm = rng.permutation(8)
        p2 = p.reshape(-1)[perm].reshape(p.shape)
        l2 = labels.reshape(-1)[perm].reshape(labels.shape)
        r2 = roi.reshape(-1)[perm].reshape(roi.shape)
        assert dice_loss_binary(Tensor(p2), l2, r2).item() == pytest.approx(base, rel=1e-12)


class TestSoftDiceRegion:
    def test_perfect_prediction_zero_loss_all_regions(self):
        rng = np.random.default_rng(7)
        labels = rng.choice([0, 1, 2, 4], size=(4, 4, 4), p=[0.7, 0.1, 0.1, 0.1]).astype(np.uint8)
        probs = one_hot_probs(labels)
        roi = np.ones_like(labels)
        for region in REGIONS.values():
            assert soft_dice_region(probs, labels, region, roi).item() == pytest.approx(0.0, abs=1e-5)

    def test_empty_region_degenerate_zero(self):
        labels = np.zeros((2, 2, 2), dtype=np.uint8)
        probs = one_hot_probs(labels)
        roi = np.ones_like(labels)
        assert soft_dice_region(probs, labels, "ET", roi).item() == pytest.approx(0.0, abs=1e-12)

    def test_two_voxel_hand_case(self):
        # labels (4, 2), predictions one-hot (4, 4):
        # ET: p-sum 2, q-sum 1, overlap 1 -> loss 1 - 2/3 = 1/3; WT: exact 0
        labels = np.array([4, 2], dtype=np.uint8).reshape(1, 1, 2)
        pred_labels = np.array([4, 4], dtype=np.uint8).reshape(1, 1, 2)
        probs = one_hot_probs(pred_labels)
        roi = np.ones_like(labels)
        et = soft_dice_region(probs, labels, "ET", roi).item()
        wt = soft_dice_region(probs, labels, "WT", roi).item()
        assert et == pytest.approx(1.0 / 3.0, abs=1e-4)
        assert wt == pytest.approx(0.0, abs=1e-5)

    def test_unknown_region_rejected(self):
        labels = np.zeros((2, 2, 2), dtype=np.uint8)
        with pytest.raises(ValueError, match="unknown region"):
            soft_dice_region(one_hot_probs(labels), labels, "XX", np.ones_like(labels))

    def test_region_spec_validation(self):
        with pytest.raises(ValueError):
            RegionSpec("bad", frozenset({3}))
        with pytest.raises(ValueError):
            RegionSpec("empty", frozenset())


class TestCrossEntropy:
    def test_perfect_prediction_near_zero(self):
        labels = np.array([0, 1, 2, 4], dtype=np.uint8).reshape(1, 1, 4)
        probs = one_hot_probs(labels)
        roi = np.ones_like(labels)
        assert cross_entropy(probs, labels, roi).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_probs_log4(self):
        labels = np.array([0, 1, 2, 4], dtype=np.uint8).reshape(1, 1, 4)
        probs = Tensor(np.full((1, 4, 1, 1, 4), 0.25))
        roi = np.ones_like(labels)
        assert cross_entropy(probs, labels, roi).item() == pytest.approx(np.log(4.0), rel=1e-9)

    def test_matches_per_voxel_oracle(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(1, 4, 2, 2, 2))
        probs = softmax_channels(Tensor(logits))
        labels = rng.choice([0, 1, 2, 4], size=(2, 2, 2)).astype(np.uint8)
        roi = (rng.random((2, 2, 2)) > 0.3).astype(np.uint8)
        channel_of = {0: 0, 1: 1, 2: 2, 4: 3}
        # scalar loop oracle
        total, count = 0.0, 0
        for z in range(2):
            for y in range(2):
                for x in range(2):
                    if roi[z, y, x]:
                        total -= np.log(probs.data[0, channel_of[labels[z, y, x]], z, y, x])
                        count += 1
        assert cross_entropy(probs, labels, roi).item() == pytest.approx(total / count, rel=1e-6)
        assert cross_entropy(probs, labels, roi, reduction="sum").item() == pytest.approx(total, rel=1e-6)

    def test_empty_roi_rejected(self):
        labels = np.zeros((2, 2, 2), dtype=np.uint8)
        with pytest.raises(ValueError, match="empty ROI"):
            cross_entropy(one_hot_probs(labels), labels, np.zeros_like(labels))

    def test_gradient(self):
        rng = np.random.default_rng(9)
        logits = Tensor(rng.normal(size=(1, 4, 2, 2, 2)), requires_grad=True)
        labels = rng.choice([0, 1, 2, 4], size=(2, 2, 2)).astype(np.uint8)
        roi = np.ones_like(labels)

        def loss():
            return cross_entropy(softmax_channels(logits), labels, roi)

        loss().backward()
        report = check_gradients(loss, [("logits", logits)], step=1e-3, tolerance=1e-4)
        assert report.ok(1e-4), report.failures[:3]


class TestCombinedLoss:
    def test_perfect_prediction_near_zero(self):
        rng = np.random.default_rng(10)
        labels = rng.choice([0, 1, 2, 4], size=(3, 3, 3), p=[0.6, 0.15, 0.15, 0.1]).astype(np.uint8)
        probs = one_hot_probs(labels)
        roi = np.ones_like(labels)
        assert combined_loss(probs, labels, roi).item() == pytest.approx(0.0, abs=1e-4)

    def test_term_by_term_resummation(self):
        labels = np.zeros((2, 2, 2), dtype=np.uint8)
        probs = Tensor(np.full((1, 4, 2, 2, 2), 0.25))
        roi = np.ones_like(labels)
        xe = cross_entropy(probs, labels, roi).item()
        parts = [soft_dice_region(probs, labels, name, roi).item() for name in ("WT", "ET", "TC")]
        total = combined_loss(probs, labels, roi).item()
        assert total == pytest.approx(xe + 0.5 * sum(parts), rel=1e-9)
        assert xe == pytest.approx(np.log(4.0), rel=1e-9)

    def test_zero_weight_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(11)
        probs = softmax_channels(Tensor(rng.normal(size=(1, 4, 2, 2, 2))))
        labels = rng.choice([0, 1, 2, 4], size=(2, 2, 2)).astype(np.uint8)
        roi = np.ones_like(labels)
        assert (combined_loss(probs, labels, roi, dice_weight=0.0).item()
                == pytest.approx(cross_entropy(probs, labels, roi).item(), rel=1e-12))

    def test_gradient(self):
        rng = np.random.default_rng(12)
        logits = Tensor(rng.normal(size=(1, 4, 2, 2, 2)), requires_grad=True)
        labels = rng.choice([0, 1, 2, 4], size=(2, 2, 2)).astype(np.uint8)
        roi = np.ones_like(labels)

        def loss():
            return combined_loss(softmax_channels(logits), labels, roi)

        loss().backward()
        report = check_gradients(loss, [("logits", logits)], step=1e-3, tolerance=1e-4)
        assert report.ok(1e-4), report.failures[:3]


class TestGradientBlocking:
    def test_masked_logits_decouple_outside_voxels_bitwise(self):
        # per-voxel path: outside logits feed only outside probabilities,
        # which the mask annihilates, so the gradient buffer is unchanged
        rng = np.random.default_rng(14)
        roi = np.zeros((2, 2, 2), dtype=np.uint8)
        roi[0] = 1
        labels = (rng.random((2, 2, 2)) > 0.5).astype(np.uint8) * roi
        base = rng.normal(size=(1, 2, 2, 2, 2))

        def grads_for(logit_data):
            logits = Tensor(logit_data, requires_grad=True)
            masked = apply_roi_mask(softmax_channels(logits), roi)
            dice_loss_binary(slice_channels(masked, 1, 2), labels, roi).backward()
            return logits.grad

        reference = grads_for(base.copy())
        perturbed = base.copy()
        perturbed[0, :, 1] += rng.normal(scale=50.0, size=(2, 2, 2))
        np.testing.assert_array_equal(reference, grads_for(perturbed))

    def test_outside_perturbation_leaves_parameter_gradients_bitwise(self):
        # through a conv layer the invariance relies on the trainer masking
        # the scan itself with the ROI before the forward pass
        rng = np.random.default_rng(13)
        kernel = ConvKernel(Tensor(rng.normal(size=(2, 2, 3, 3, 3)) * 0.3, requires_grad=True),
                            Tensor(rng.normal(size=2), requires_grad=True))
        roi = np.zeros((4, 4, 4), dtype=np.uint8)
        roi[:2] = 1
        labels = (rng.random((4, 4, 4)) > 0.6).astype(np.uint8) * roi
        scan = rng.normal(size=(1, 2, 4, 4, 4))

        def grads_for(scan_data):
            kernel.weights.zero_grad()
            kernel.bias.zero_grad()
            gated = scan_data * roi[None, None]
            probs = softmax_channels(conv3d(Tensor(gated), kernel, stride=1, padding=1))
            masked = apply_roi_mask(probs, roi)
            dice_loss_binary(slice_channels(masked, 1, 2), labels, roi).backward()
            return kernel.weights.grad.copy(), kernel.bias.grad.copy()

        base_w, base_b = grads_for(scan)
        perturbed = scan.copy()
        perturbed[0, :, 2:] += rng.normal(scale=100.0, size=(2, 2, 4, 4))
        pert_w, pert_b = grads_for(perturbed)
        np.testing.assert_array_equal(base_w, pert_w)
        np.testing.assert_array_equal(base_b, pert_b)
