"""Segmentation quality metrics (DSC, NSD) and cohort statistics tables.

NSD follows the boundary-voxel formulation: the boundary of a mask is the
set of its voxels with at least one six-neighbor outside the mask, distances
between boundaries are exact Euclidean in physical millimetres (anisotropy
aware), and the score is the symmetric average of the two within-tolerance
boundary fractions. Both-empty pairs score 1.0 by convention so absent
structures do not poison cohort means; reports flag the convention and
always carry the tolerance used.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import LABEL_NAMES, LabelVolume

DEFAULT_TAU_MM = 2.0


def _require_same_grid(a: LabelVolume, b: LabelVolume) -> None:
    if not a.meta.same_grid(b.meta):
        raise ValidationError("metric inputs must share an identical grid")


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Overlap 2|A∩B| / (|A|+|B|) for the voxels carrying ``label``.

    Two empty masks count as perfect agreement (1.0).
    """
    _require_same_grid(a, b)
    ma = a.labels == label
    mb = b.labels == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(ma, mb).sum())
    return 2.0 * inter / total


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one six-neighbor outside the mask.

    Neighbors beyond the array edge count as outside, so masks touching the
    volume border still have a boundary there.
    """
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def nsd(a: LabelVolume, b: LabelVolume, label: int,
        tau_mm: float = DEFAULT_TAU_MM) -> float:
    """Normalized surface distance at tolerance ``tau_mm``.

    Fraction of each mask's boundary voxels lying within ``tau_mm`` of the
    other mask's boundary, averaged symmetrically. Both masks empty -> 1.0;
    exactly one empty -> 0.0.
    """
    _require_same_grid(a, b)
    if tau_mm <= 0:
        raise ValidationError(f"tau_mm must be > 0, got {tau_mm}")
    ba = boundary_voxels(a.labels == label)
    bb = boundary_voxels(b.labels == label)
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    spacing = a.meta.spacing
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    frac_a = float(np.count_nonzero(dist_to_b[ba] <= tau_mm)) / na
    frac_b = float(np.count_nonzero(dist_to_a[bb] <= tau_mm)) / nb
    return 0.5 * (frac_a + frac_b)


@dataclass
class MetricReport:
    """Per-case and aggregate DSC/NSD, mirroring structure-wise result tables."""

    tau_mm: float
    labels: tuple[int, ...]
    per_case: dict[str, dict[int, dict[str, float]]] = field(default_factory=dict)

    @property
    def n_cases(self) -> int:
        return len(self.per_case)

    def aggregate(self) -> dict[int, dict[str, float]]:
        """Mean and sample (n-1) standard deviation per label."""
        out: dict[int, dict[str, float]] = {}
        case_ids = sorted(self.per_case)
        for label in self.labels:
            dices = np.array([self.per_case[c][label]["dice"] for c in case_ids])
            nsds = np.array([self.per_case[c][label]["nsd"] for c in case_ids])
            out[label] = {
                "dice_mean": float(np.mean(dices)),
                "dice_sd": float(np.std(dices, ddof=1)) if len(dices) > 1 else 0.0,
                "nsd_mean": float(np.mean(nsds)),
                "nsd_sd": float(np.std(nsds, ddof=1)) if len(nsds) > 1 else 0.0,
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["structure", "dice_mean", "dice_sd", "nsd_mean",
                         "nsd_sd", "tau_mm", "n_cases"])
        agg = self.aggregate()
        for label in self.labels:
            row = agg[label]
            writer.writerow([
                LABEL_NAMES[label],
                f"{row['dice_mean']:.6f}", f"{row['dice_sd']:.6f}",
                f"{row['nsd_mean']:.6f}", f"{row['nsd_sd']:.6f}",
                f"{self.tau_mm:g}", str(self.n_cases),
            ])
        return buf.getvalue()

    def to_text(self) -> str:
        agg = self.aggregate()
        lines = [
            f"Structure-wise metrics over {self.n_cases} case(s), "
            f"NSD tolerance {self.tau_mm:g} mm "
            "(empty-vs-empty pairs score 1.0)",
            f"{'structure':<16} {'mean DSC (±SD)':<22} {'mean NSD (±SD)':<22}",
        ]
        for label in self.labels:
            row = agg[label]
            lines.append(
                f"{LABEL_NAMES[label]:<16} "
                f"{row['dice_mean']:.3f} (±{row['dice_sd']:.3f})      "
                f"{row['nsd_mean']:.3f} (±{row['nsd_sd']:.3f})")
        return "\n".join(lines) + "\n"


def evaluate_cohort(pairs, labels, tau_mm: float = DEFAULT_TAU_MM) -> MetricReport:
    """Compute per-case and aggregate metrics for (prediction, truth, case_id) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("evaluate_cohort needs at least one pair")
    labels = tuple(int(l) for l in labels)
    report = MetricReport(tau_mm=tau_mm, labels=labels)
    for pred, truth, case_id in sorted(pairs, key=lambda p: p[2]):
        if not pred.meta.same_grid(truth.meta):
            raise ValidationError(
                f"case {case_id}: prediction and truth grids differ")
        report.per_case[case_id] = {
            label: {"dice": dice(pred, truth, label),
                    "nsd": nsd(pred, truth, label, tau_mm)}
            for label in labels
        }
    return report
