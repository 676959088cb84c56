"""Segmentation evaluation: region merging, Dice, Hausdorff, sens/spec, reports.

Predicted and reference label volumes are merged into the three nested
regions ET (label 4), TC (labels 1, 4) and WT (labels 1, 2, 4) before
scoring. Undefined metrics (empty point sets, empty domains) are flagged as
``None`` and excluded from cohort means rather than silently zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .losses import REGIONS

REGION_ORDER = ("ET", "WT", "TC")  # column order of the result tables

VALID_LABELS = (0, 1, 2, 4)

RECORD_FIELDS = ("subject", "region", "dice", "hausdorff", "sensitivity", "specificity")


def merge_labels(seg):
    """Split a label volume into the ET / WT / TC binary region masks."""
    seg = np.asarray(seg)
    if not np.isin(seg, VALID_LABELS).all():
        bad = np.unique(seg[~np.isin(seg, VALID_LABELS)])
        raise ValueError(f"unknown label values {bad[:8]}; expected subset of {VALID_LABELS}")
    return {name: REGIONS[name].indicator(seg).astype(np.uint8) for name in REGION_ORDER}


def dice(a, b):
    """Overlap score 2|A n B| / (|A| + |B|); two empty masks agree perfectly."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice requires equal dims, got {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_voxels(mask):
    """Voxels of the mask with at least one face neighbor outside it."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def hausdorff(a, b, spacing=None):
    """Symmetric Hausdorff distance between two masks' boundary voxels.

    The exact max-max variant: the larger of the two directed maxima of
    Euclidean nearest-neighbor distances. Anisotropic ``spacing`` (mm per
    axis) scales coordinates when given. Returns ``None`` if either mask is
    empty (undefined, to be excluded from means).
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"hausdorff requires equal dims, got {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None
    pts_a = np.argwhere(boundary_voxels(a)).astype(np.float64)
    pts_b = np.argwhere(boundary_voxels(b)).astype(np.float64)
    if spacing is not None:
        scale = np.asarray(spacing, dtype=np.float64)
        pts_a = pts_a * scale
        pts_b = pts_b * scale
    d_ab = cKDTree(pts_b).query(pts_a)[0].max()
    d_ba = cKDTree(pts_a).query(pts_b)[0].max()
    return float(max(d_ab, d_ba))


def hausdorff_percentile(a, b, percentile=95.0, spacing=None):
    """Percentile variant of the directed distances (robust alternative)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if not a.any() or not b.any():
        return None
    pts_a = np.argwhere(boundary_voxels(a)).astype(np.float64)
    pts_b = np.argwhere(boundary_voxels(b)).astype(np.float64)
    if spacing is not None:
        scale = np.asarray(spacing, dtype=np.float64)
        pts_a = pts_a * scale
        pts_b = pts_b * scale
    d_ab = cKDTree(pts_b).query(pts_a)[0]
    d_ba = cKDTree(pts_a).query(pts_b)[0]
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def sensitivity_specificity(pred, gt, eval_domain=None):
    """(TP/(TP+FN), TN/(TN+FP)) over the evaluation domain (default: all).

    Empty ground truth leaves sensitivity undefined; an empty background
    leaves specificity undefined; both are returned as ``None``.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"sens/spec requires equal dims, got {pred.shape} vs {gt.shape}")
    domain = np.ones_like(gt) if eval_domain is None else np.asarray(eval_domain, dtype=bool)
    tp = int((pred & gt & domain).sum())
    fn = int((~pred & gt & domain).sum())
    tn = int((~pred & ~gt & domain).sum())
    fp = int((pred & ~gt & domain).sum())
    sens = tp / (tp + fn) if (tp + fn) > 0 else None
    spec = tn / (tn + fp) if (tn + fp) > 0 else None
    return sens, spec


@dataclass
class MetricRow:
    subject: str
    region: str
    dice: float
    hausdorff: float | None
    sensitivity: float | None
    specificity: float | None

    def values(self):
        return (self.dice, self.hausdorff, self.sensitivity, self.specificity)


@dataclass
class RegionMeans:
    dice: float | None = None
    hausdorff: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    excluded: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    """Per-scan rows plus per-region means, in ET / WT / TC order."""

    rows: list
    means: dict

    def to_table(self):
        """Human-readable summary table."""
        lines = []
        header = f"{'subject':<16}{'region':<8}{'dice':>8}{'hausdorff':>11}{'sens':>8}{'spec':>8}"
        lines.append(header)
        lines.append("-" * len(header))

        def fmt(value, width):
            return f"{'n/a':>{width}}" if value is None else f"{value:>{width}.3f}"

        for row in self.rows:
            lines.append(f"{row.subject:<16}{row.region:<8}"
                         f"{fmt(row.dice, 8)}{fmt(row.hausdorff, 11)}"
                         f"{fmt(row.sensitivity, 8)}{fmt(row.specificity, 8)}")
        lines.append("-" * len(header))
        for region in REGION_ORDER:
            m = self.means[region]
            lines.append(f"{'mean':<16}{region:<8}"
                         f"{fmt(m.dice, 8)}{fmt(m.hausdorff, 11)}"
                         f"{fmt(m.sensitivity, 8)}{fmt(m.specificity, 8)}")
            if any(m.excluded.values()):
                parts = ", ".join(f"{k}: {v}" for k, v in m.excluded.items() if v)
                lines.append(f"{'':<16}{'':<8}  excluded undefined -> {parts}")
        return "\n".join(lines)

    def to_records(self):
        """Machine-readable CSV, one record per scan per region.

        Field order: subject, region, dice, hausdorff, sensitivity,
        specificity. Undefined metrics serialize as the empty string. Mean
        rows follow the per-scan rows with subject ``mean``.
        """
        def cell(value):
            return "" if value is None else repr(float(value))

        lines = [",".join(RECORD_FIELDS)]
        for row in self.rows:
            lines.append(",".join([row.subject, row.region] +
                                  [cell(v) for v in row.values()]))
        for region in REGION_ORDER:
            m = self.means[region]
            lines.append(",".join(["mean", region, cell(m.dice), cell(m.hausdorff),
                                   cell(m.sensitivity), cell(m.specificity)]))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_records())

    def mean_dice(self, region):
        return self.means[region].dice


def evaluate_pair(subject, pred, gt, spacing=None):
    """Region metric rows for one (prediction, ground truth) label pair."""
    pred_regions = merge_labels(pred)
    gt_regions = merge_labels(gt)
    rows = []
    for region in REGION_ORDER:
        p, g = pred_regions[region], gt_regions[region]
        sens, spec = sensitivity_specificity(p, g)
        rows.append(MetricRow(subject=subject, region=region,
                              dice=dice(p, g),
                              hausdorff=hausdorff(p, g, spacing=spacing),
                              sensitivity=sens, specificity=spec))
    return rows


def evaluate_cohort(pairs, subjects=None, spacing=None):
    """Metrics report for aligned (pred, gt) label-volume pairs.

    Per-region means skip undefined metrics and count the exclusions. The
    result is independent of the processing order of the pairs.
    """
    pairs = list(pairs)
    if subjects is None:
        subjects = [f"scan-{i:03d}" for i in range(len(pairs))]
    if len(subjects) != len(pairs):
        raise ValueError(f"{len(subjects)} subject ids for {len(pairs)} pairs")
    rows = []
    for subject, (pred, gt) in zip(subjects, pairs):
        rows.extend(evaluate_pair(subject, pred, gt, spacing=spacing))
    means = {}
    for region in REGION_ORDER:
        region_rows = [r for r in rows if r.region == region]
        means[region] = RegionMeans(excluded={})
        for metric in ("dice", "hausdorff", "sensitivity", "specificity"):
            values = [getattr(r, metric) for r in region_rows]
            defined = [v for v in values if v is not None]
            means[region].excluded[metric] = len(values) - len(defined)
            setattr(means[region], metric,
                    float(np.mean(defined)) if defined else None)
    return MetricsReport(rows=rows, means=means)
