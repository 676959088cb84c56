"""Finite-difference verification of reverse-mode gradients.

Central differences are an oracle that is only valid where the function is
smooth over the probe interval. ReLU, max-pooling and clamping introduce
kinks; a probe that makes any such decision flip between the two evaluation
points measures a different function on each side. ``check_gradients``
therefore compares the decision patterns of both probe graphs and reports
kink-straddling coordinates separately instead of counting them as
mismatches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import graph_nodes

_KINKED_OPS = ("relu", "maxpool3d", "clamp_min")


def central_difference(loss_fn, leaf, step=1e-3):
    """Central finite differences of a scalar closure w.r.t. one leaf tensor.

    Perturbs ``leaf.data`` in place coordinate by coordinate and re-runs
    ``loss_fn``; the closure must rebuild the graph from the live leaves.
    """
    flat = leaf.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn().item()
        flat[i] = orig - step
        lo = loss_fn().item()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(leaf.data.shape)


def max_relative_error(analytic, reference, threshold=0.0):
    """Largest |a - r| / max(|a|, |r|) over coordinates with |a| > threshold."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    keep = np.abs(analytic) > threshold
    if not keep.any():
        return 0.0
    denom = np.maximum(np.abs(analytic[keep]), np.abs(reference[keep]))
    denom = np.maximum(denom, np.finfo(np.float64).tiny)
    return float(np.max(np.abs(analytic[keep] - reference[keep]) / denom))


def decision_pattern(loss_tensor):
    """The (relu mask, pool argmax, clamp mask) records of one evaluation."""
    return [node.op_state for node in graph_nodes(loss_tensor) if node.op in _KINKED_OPS]


def _patterns_equal(a, b):
    if len(a) != len(b):
        return False
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradientCheckReport:
    """Outcome of a kink-aware finite-difference sweep over parameters."""

    checked: int = 0
    skipped_small: int = 0
    straddling: int = 0
    worst_error: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def straddle_fraction(self):
        total = self.checked + self.straddling
        return self.straddling / total if total else 0.0

    def ok(self, tolerance):
        return not self.failures and self.worst_error <= tolerance


def check_gradients(loss_fn, leaves, step=1e-3, tolerance=1e-4, grad_floor=1e-6,
                    report=None):
    """Sweep every coordinate of every leaf against central differences.

    ``loss_fn`` must rebuild the graph from the live leaves and return the
    scalar loss tensor. Coordinates whose probe straddles a relu/maxpool/clamp
    decision flip are tallied as ``straddling`` and not compared; coordinates
    with |analytic gradient| <= ``grad_floor`` are skipped. Gradients must
    already be populated on the leaves.
    """
    if report is None:
        report = GradientCheckReport()
    for name, leaf in leaves:
        analytic = leaf.grad
        if analytic is None:
            raise ValueError(f"leaf {name} has no gradient; call backward first")
        flat = leaf.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            if abs(aflat[i]) <= grad_floor:
                report.skipped_small += 1
                continue
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            pattern_hi = decision_pattern(hi)
            flat[i] = orig - step
            lo = loss_fn()
            pattern_lo = decision_pattern(lo)
            flat[i] = orig
            if not _patterns_equal(pattern_hi, pattern_lo):
                report.straddling += 1
                continue
            fd = (hi.item() - lo.item()) / (2.0 * step)
            err = abs(aflat[i] - fd) / max(abs(aflat[i]), abs(fd))
            report.checked += 1
            report.worst_error = max(report.worst_error, err)
            if err > tolerance:
                report.failures.append((name, i, float(aflat[i]), fd, err))
    return report
