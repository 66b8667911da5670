"""Merge T1W anatomy and DCE lesion masks into one multi-label volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .transform import RigidTransform
from .volume import LABEL_LESION, LabelVolume, resample_labels


@dataclass(frozen=True)
class FusionResult:
    """Fused volume plus the lesion containment statistic.

    Lesion voxels landing outside the whole-breast mask are deliberately
    kept: silently clipping them could hide a registration failure, so the
    count is surfaced instead.
    """

    fused: LabelVolume
    lesion_voxels: int
    lesion_outside_breast: int

    @property
    def containment_fraction(self) -> float:
        if self.lesion_voxels == 0:
            return 1.0
        return 1.0 - self.lesion_outside_breast / self.lesion_voxels


def fuse_labels(anatomy: LabelVolume, lesion: LabelVolume,
                xform: RigidTransform | None = None) -> FusionResult:
    """Overlay the lesion mask on the anatomy grid with per-voxel precedence
    lesion > fibroglandular > whole-breast > background.

    ``xform`` maps lesion (DCE) world coordinates onto anatomy (T1W) world
    coordinates, i.e. the transform produced by co-registration.
    """
    if not (anatomy.labels > 0).any():
        raise StateError("anatomy mask is empty; nothing to fuse onto")
    pull = xform.inverse() if xform is not None else None
    moved = resample_labels(lesion, anatomy.meta, pull)
    lesion_mask = moved.labels == LABEL_LESION
    fused = anatomy.labels.copy()
    fused[lesion_mask] = LABEL_LESION
    outside = int(np.count_nonzero(lesion_mask & (anatomy.labels == 0)))
    return FusionResult(fused=LabelVolume(anatomy.meta, fused),
                        lesion_voxels=int(lesion_mask.sum()),
                        lesion_outside_breast=outside)
