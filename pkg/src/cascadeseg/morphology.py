"""Non-learned volumetric operators: components, filtering, boxes, brain mask.

These realize the cascade's morphological filtering step and the rectangular
ROI construction. All operators are deterministic pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


class EmptyLabelsError(ValueError):
    """A label volume required to contain tumor voxels has none."""


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box with inclusive voxel index corners."""

    min_corner: tuple
    max_corner: tuple

    def __post_init__(self):
        object.__setattr__(self, "min_corner", tuple(int(v) for v in self.min_corner))
        object.__setattr__(self, "max_corner", tuple(int(v) for v in self.max_corner))
        if len(self.min_corner) != 3 or len(self.max_corner) != 3:
            raise ValueError("box corners must be index triples")
        for lo, hi in zip(self.min_corner, self.max_corner):
            if lo < 0 or lo > hi:
                raise ValueError(f"invalid box corners {self.min_corner} .. {self.max_corner}")

    @property
    def shape(self):
        return tuple(hi - lo + 1 for lo, hi in zip(self.min_corner, self.max_corner))

    def slices(self):
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.min_corner, self.max_corner))

    def dilated(self, margin, bounds):
        """A copy grown by ``margin`` per axis and clipped to ``bounds``."""
        if margin < 0:
            raise ValueError(f"margin must be non-negative, got {margin}")
        lo = tuple(max(0, v - margin) for v in self.min_corner)
        hi = tuple(min(b - 1, v + margin) for v, b in zip(self.max_corner, bounds))
        return Box3D(lo, hi)

    def to_mask(self, dims):
        for corner in (self.min_corner, self.max_corner):
            if any(c >= d for c, d in zip(corner, dims)):
                raise ValueError(f"box corner {corner} outside volume dims {dims}")
        mask = np.zeros(dims, dtype=np.uint8)
        mask[self.slices()] = 1
        return mask

    def contains(self, index):
        return all(lo <= i <= hi for lo, i, hi in
                   zip(self.min_corner, index, self.max_corner))


@dataclass
class ComponentLabeling:
    """Component ids per voxel (0 = background) and their voxel counts."""

    labels: np.ndarray
    sizes: dict

    @property
    def n_components(self):
        return len(self.sizes)


def _check_binary(mask, name="mask"):
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"{name} must be a 3-D volume, got shape {mask.shape}")
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"{name} must be binary, found values {values[:8]}")
    return mask


def connected_components(mask, connectivity=26):
    """Label connected foreground regions under 6/18/26-adjacency.

    Ids are assigned contiguously from 1 in order of each component's first
    voxel in scan (C) order, making the labeling deterministic.
    """
    mask = _check_binary(mask)
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    raw, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return ComponentLabeling(labels=raw.astype(np.int32), sizes={})
    # renumber by first-voxel scan order, independent of scipy's internals
    flat = raw.ravel()
    first_index = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first_index, flat, np.arange(flat.size))
    order = np.argsort(first_index[1:], kind="stable") + 1
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, count + 1)
    labels = remap[raw]
    counts = np.bincount(labels.ravel(), minlength=count + 1)
    sizes = {int(i): int(counts[i]) for i in range(1, count + 1)}
    return ComponentLabeling(labels=labels, sizes=sizes)


def filter_small_components(labeling, policy="keep_largest", min_voxels=1):
    """Keep components by size; returns the surviving voxels as a binary mask.

    ``min_voxels`` keeps every component of at least that size;
    ``keep_largest`` keeps exactly the largest one (ties break to the lowest
    id). An empty labeling yields an empty mask: no detection is a valid
    outcome.
    """
    if policy not in ("keep_largest", "min_voxels"):
        raise ValueError(f"unknown policy {policy!r}")
    if not labeling.sizes:
        return np.zeros(labeling.labels.shape, dtype=np.uint8)
    if policy == "keep_largest":
        best = max(labeling.sizes, key=lambda i: (labeling.sizes[i], -i))
        keep = {best}
    else:
        if min_voxels < 1:
            raise ValueError(f"min_voxels must be >= 1, got {min_voxels}")
        keep = {i for i, size in labeling.sizes.items() if size >= min_voxels}
    return np.isin(labeling.labels, sorted(keep)).astype(np.uint8)


def bounding_box(mask, margin=0):
    """Tightest inclusive box around the nonzero voxels, plus its raster mask.

    Returns ``(Box3D, mask_volume)``; the box is dilated by ``margin`` per
    axis and clipped to the volume. An empty input returns ``None`` - the
    distinguished no-detection result the cascade must handle.
    """
    mask = _check_binary(mask)
    coords = np.nonzero(mask)
    if coords[0].size == 0:
        return None
    box = Box3D(tuple(int(c.min()) for c in coords),
                tuple(int(c.max()) for c in coords))
    box = box.dilated(margin, mask.shape)
    return box, box.to_mask(mask.shape)


def gt_tumor_box(labels, margin=0):
    """Rectangular mask covering every tumor label, as used for training.

    Raises ``EmptyLabelsError`` on tumor-free volumes: the region network is
    only trained in the vicinity of a tumor.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"labels must be a 3-D volume, got shape {labels.shape}")
    boxed = bounding_box((labels > 0).astype(np.uint8), margin=margin)
    if boxed is None:
        raise EmptyLabelsError("label volume contains no tumor voxels")
    return boxed[1]


def brain_mask(scan):
    """Voxels where any modality is nonzero (skull-stripped convention)."""
    out = None
    for volume in scan.modalities():
        nonzero = np.asarray(volume) != 0
        out = nonzero if out is None else (out | nonzero)
    return out.astype(np.uint8)
