"""Intensity conditioning before segmentation and for display mapping.

Noise reduction is a physical-units Gaussian and contrast enhancement is
percentile normalization; both are deliberately simple, and their defaults
live in the pipeline config rather than in code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import ImageVolume

DEFAULT_SIGMA_MM = 0.5
DEFAULT_PERCENTILES = (1.0, 99.0)


@dataclass(frozen=True)
class WindowSpec:
    """Linear display window mapping [low, high] intensity onto [0, 1]."""

    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise ValidationError(
                f"window high must exceed low, got [{self.low}, {self.high}]")


@dataclass(frozen=True)
class NormalizeResult:
    volume: ImageVolume
    degenerate: bool  # all input voxels equal; output forced to zero


def denoise_gaussian(vol: ImageVolume, sigma_mm: float) -> ImageVolume:
    """Separable Gaussian smoothing with sigma given in millimetres.

    Per-axis sigma in voxels is sigma_mm / spacing, so anisotropic grids
    blur isotropically in physical space. Boundaries clamp to the edge
    value to avoid a dark halo at the breast/air interface.
    """
    if sigma_mm <= 0:
        raise ValidationError(f"sigma_mm must be > 0, got {sigma_mm}")
    sigma_vox = sigma_mm / vol.meta.spacing
    out = ndimage.gaussian_filter(vol.voxels.astype(np.float64), sigma_vox,
                                  mode="nearest")
    return ImageVolume(vol.meta, out.astype(np.float32))


def normalize_percentile(vol: ImageVolume, p_low: float = DEFAULT_PERCENTILES[0],
                         p_high: float = DEFAULT_PERCENTILES[1]) -> NormalizeResult:
    """Map the [p_low, p_high] percentile range onto [0, 1], clamped.

    A degenerate volume (all voxels equal) yields an all-zero volume with
    the ``degenerate`` flag set instead of an error.
    """
    if not (0 <= p_low < p_high <= 100):
        raise ValidationError(
            f"percentiles must satisfy 0 <= low < high <= 100, got "
            f"({p_low}, {p_high})")
    values = vol.voxels.astype(np.float64)
    lo, hi = np.percentile(values, [p_low, p_high])
    if hi <= lo:
        zero = ImageVolume(vol.meta, np.zeros(vol.meta.dims, dtype=np.float32))
        return NormalizeResult(volume=zero, degenerate=True)
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return NormalizeResult(volume=ImageVolume(vol.meta, scaled.astype(np.float32)),
                           degenerate=False)


def apply_window(vol: ImageVolume, window: WindowSpec) -> ImageVolume:
    """Clamped linear map of [window.low, window.high] onto [0, 1]."""
    values = vol.voxels.astype(np.float64)
    scaled = np.clip((values - window.low) / (window.high - window.low), 0.0, 1.0)
    return ImageVolume(vol.meta, scaled.astype(np.float32))
