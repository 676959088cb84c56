"""ROI-masked prediction outputs and the dice / cross-entropy training losses.

The ROI mask multiplies all class probabilities outside the region by zero
and sets the background channel there to one. The multiplication blocks the
backpropagated signal exactly, so outside voxels contribute nothing to
learning; losses additionally restrict their sums to the ROI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, slice_channels

BACKGROUND_CHANNEL = 0

# channel layout of the 4-class network: (background, label 1, label 2, label 4)
CHANNEL_LABELS = (0, 1, 2, 4)
LABEL_TO_CHANNEL = {label: ch for ch, label in enumerate(CHANNEL_LABELS)}


@dataclass(frozen=True)
class RegionSpec:
    """A merged evaluation region: a name plus the label values it covers."""

    name: str
    labels: frozenset

    def __post_init__(self):
        if not self.labels or not self.labels <= {1, 2, 4}:
            raise ValueError(f"region labels must be a non-empty subset of {{1,2,4}}, "
                             f"got {set(self.labels)}")

    def indicator(self, labels):
        mask = np.zeros(labels.shape, dtype=bool)
        for value in self.labels:
            mask |= labels == value
        return mask


WHOLE_TUMOR = RegionSpec("WT", frozenset({1, 2, 4}))
TUMOR_CORE = RegionSpec("TC", frozenset({1, 4}))
ENHANCING_TUMOR = RegionSpec("ET", frozenset({4}))

REGIONS = {r.name: r for r in (ENHANCING_TUMOR, WHOLE_TUMOR, TUMOR_CORE)}


def _check_mask(mask, name="mask"):
    mask = np.asarray(mask)
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"{name} must be binary, found values {values[:8]}")
    return mask


def _check_spatial(probs, volume, what):
    if probs.data.shape[2:] != volume.shape:
        raise ShapeError(
            f"{what} shape {volume.shape} does not match probabilities "
            f"{probs.data.shape[2:]}")


def apply_roi_mask(probs, mask):
    """Force voxels outside ``mask`` to background with probability one.

    Inside the mask probabilities pass through unchanged. Outside, every
    channel is multiplied by zero (blocking gradients there exactly) and the
    background channel is raised to one.
    """
    if probs.data.ndim != 5:
        raise ShapeError(f"apply_roi_mask expects 5-D probabilities, got {probs.data.shape}")
    mask = _check_mask(mask, "roi mask")
    _check_spatial(probs, mask, "roi mask")
    channels = probs.data.shape[1]
    inside = np.broadcast_to(mask.astype(probs.dtype),
                             (1, channels) + mask.shape)
    background_fill = np.zeros((1, channels) + mask.shape, dtype=probs.dtype)
    background_fill[0, BACKGROUND_CHANNEL] = 1.0 - mask
    return probs * Tensor(np.ascontiguousarray(inside)) + Tensor(background_fill)


def _flat_constant(volume, probs_dtype):
    return Tensor(np.ascontiguousarray(volume, dtype=probs_dtype).reshape(
        (1, 1) + volume.shape))


def dice_ratio(probs, labels, roi, epsilon=0.0):
    """The overlap ratio sum(p*l) / (sum(p) + sum(l) + eps) inside the ROI.

    ``probs`` is the tumor-channel tensor of shape (1, 1, D, H, W). This is
    the raw coefficient the binary dice loss is built from; perfect binary
    overlap gives 0.5.
    """
    labels = _check_mask(np.asarray(labels), "labels")
    roi = _check_mask(roi, "roi")
    if probs.data.ndim != 5 or probs.data.shape[:2] != (1, 1):
        raise ShapeError(f"dice ratio expects a (1,1,D,H,W) tensor, got {probs.data.shape}")
    _check_spatial(probs, labels, "labels")
    _check_spatial(probs, roi, "roi")
    roi_t = _flat_constant(roi, probs.dtype)
    label_roi = _flat_constant(labels * roi, probs.dtype)
    p_roi = probs * roi_t
    intersection = (p_roi * label_roi).sum()
    denom = p_roi.sum() + label_roi.sum() + float(epsilon)
    return intersection / denom


def dice_loss_binary(probs, labels, roi, epsilon=1e-5):
    """1 - (2*sum(p*l) + eps) / (sum(p) + sum(l) + eps) over ROI voxels.

    Zero for a perfect binary segmentation, one for a disjoint one; the
    epsilon in numerator and denominator makes the empty/empty case a
    well-defined zero.
    """
    labels = _check_mask(np.asarray(labels), "labels")
    roi = _check_mask(roi, "roi")
    if probs.data.ndim != 5 or probs.data.shape[:2] != (1, 1):
        raise ShapeError(f"binary dice expects a (1,1,D,H,W) tensor, got {probs.data.shape}")
    _check_spatial(probs, labels, "labels")
    _check_spatial(probs, roi, "roi")
    roi_t = _flat_constant(roi, probs.dtype)
    label_roi = _flat_constant(labels * roi, probs.dtype)
    p_roi = probs * roi_t
    intersection = (p_roi * label_roi).sum()
    denom = p_roi.sum() + label_roi.sum() + float(epsilon)
    return 1.0 - (intersection * 2.0 + float(epsilon)) / denom


def _region_probability(probs, region):
    channels = sorted(LABEL_TO_CHANNEL[label] for label in region.labels)
    acc = slice_channels(probs, channels[0], channels[0] + 1)
    for ch in channels[1:]:
        acc = acc + slice_channels(probs, ch, ch + 1)
    return acc


def soft_dice_region(probs, labels, region, roi, epsilon=1e-5):
    """Soft dice loss of one merged tumor region, restricted to the ROI."""
    if isinstance(region, str):
        try:
            region = REGIONS[region]
        except KeyError:
            raise ValueError(f"unknown region {region!r}; expected one of {sorted(REGIONS)}")
    labels = np.asarray(labels)
    roi = _check_mask(roi, "roi")
    if probs.data.ndim != 5 or probs.data.shape[1] != len(CHANNEL_LABELS):
        raise ShapeError(
            f"region dice expects (1,{len(CHANNEL_LABELS)},D,H,W) probabilities, "
            f"got {probs.data.shape}")
    _check_spatial(probs, labels, "labels")
    _check_spatial(probs, roi, "roi")
    p_region = _region_probability(probs, region)
    target = region.indicator(labels) & (roi > 0)
    roi_t = _flat_constant(roi, probs.dtype)
    target_t = _flat_constant(target, probs.dtype)
    p_roi = p_region * roi_t
    intersection = (p_roi * target_t).sum()
    denom = p_roi.sum() + target_t.sum() + float(epsilon)
    return 1.0 - (intersection * 2.0 + float(epsilon)) / denom


def cross_entropy(probs, labels, roi, reduction="mean", clamp=1e-12):
    """Cross entropy -log p(true class) over ROI voxels (mean by default)."""
    labels = np.asarray(labels)
    roi = _check_mask(roi, "roi")
    if probs.data.ndim != 5 or probs.data.shape[1] != len(CHANNEL_LABELS):
        raise ShapeError(
            f"cross entropy expects (1,{len(CHANNEL_LABELS)},D,H,W) probabilities, "
            f"got {probs.data.shape}")
    _check_spatial(probs, labels, "labels")
    _check_spatial(probs, roi, "roi")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    n_roi = int(roi.sum())
    if n_roi == 0:
        raise ValueError("cross entropy over an empty ROI is undefined")
    if not np.isin(labels, CHANNEL_LABELS).all():
        raise ValueError(f"labels must take values in {CHANNEL_LABELS}")

    onehot = np.zeros(probs.data.shape, dtype=probs.dtype)
    for ch, label in enumerate(CHANNEL_LABELS):
        onehot[0, ch] = (labels == label) & (roi > 0)
    picked = probs.clamp_min(clamp).log() * Tensor(onehot)
    total = picked.sum() * -1.0
    if reduction == "sum":
        return total
    return total / float(n_roi)


def combined_loss(probs, labels, roi, dice_weight=0.5, epsilon=1e-5,
                  xe_reduction="mean"):
    """Cross entropy plus weighted per-region soft dice losses.

    total = XE + w * (D_WT + D_ET + D_TC) with w defaulting to 0.5.
    """
    xe = cross_entropy(probs, labels, roi, reduction=xe_reduction)
    d_wt = soft_dice_region(probs, labels, WHOLE_TUMOR, roi, epsilon)
    d_et = soft_dice_region(probs, labels, ENHANCING_TUMOR, roi, epsilon)
    d_tc = soft_dice_region(probs, labels, TUMOR_CORE, roi, epsilon)
    return xe + (d_wt + d_et + d_tc) * float(dice_weight)
