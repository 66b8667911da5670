"""Geometric volume types and the resampling/connectivity operations shared by every stage.

Conventions used throughout the package:

* voxel ordering is x-fastest; in-memory arrays are indexed ``[ix, iy, iz]``
  and serialized in Fortran order so the on-disk layout matches NIfTI.
* ``GridMeta.direction`` columns are the world-space unit vectors of the
  voxel axes; world = origin + direction @ (spacing * index).
* volumes are immutable after construction (arrays are marked read-only),
  so every operation here is a pure function safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GeometryError, ValidationError

# Registered label dictionary for every LabelVolume in the pipeline.
LABEL_BACKGROUND = 0
LABEL_WHOLE_BREAST = 1
LABEL_FIBROGLANDULAR = 2
LABEL_LESION = 3

LABEL_NAMES = {
    LABEL_BACKGROUND: "background",
    LABEL_WHOLE_BREAST: "whole_breast",
    LABEL_FIBROGLANDULAR: "fibroglandular",
    LABEL_LESION: "lesion",
}

_ORTHO_TOL = 1e-6


def _as_float3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(3).copy()
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class GridMeta:
    """Physical geometry of a voxel grid.

    Attributes:
        dims: voxels per axis (nx, ny, nz), each >= 1.
        spacing: mm per voxel along each axis, strictly positive.
        origin: world position (mm) of the center of voxel (0, 0, 0).
        direction: 3x3 orthonormal matrix; column k is the world direction
            of voxel axis k.
    """

    dims: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray

    def __init__(self, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                 direction=None):
        dims = tuple(int(d) for d in np.asarray(dims).reshape(3))
        if any(d < 1 for d in dims):
            raise ValidationError(f"dims must all be >= 1, got {dims}")
        spacing = _as_float3(spacing, "spacing")
        if np.any(spacing <= 0):
            raise ValidationError(f"spacing must be > 0, got {spacing}")
        origin = _as_float3(origin, "origin")
        if direction is None:
            direction = np.eye(3)
        direction = np.asarray(direction, dtype=np.float64).reshape(3, 3).copy()
        gram = direction.T @ direction
        if not np.allclose(gram, np.eye(3), atol=_ORTHO_TOL):
            raise GeometryError(
                "direction columns must be unit length and pairwise orthogonal "
                f"(tolerance {_ORTHO_TOL}); got\n{direction}")
        spacing.flags.writeable = False
        origin.flags.writeable = False
        direction.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def center_world(self) -> np.ndarray:
        """World coordinates of the grid center (used as default rotation center)."""
        center_idx = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0
        return voxel_to_world(self, center_idx)

    def same_grid(self, other: "GridMeta", tol: float = 1e-6) -> bool:
        """True when both grids describe the same voxel lattice within ``tol`` mm."""
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, atol=tol)
                and np.allclose(self.origin, other.origin, atol=tol)
                and np.allclose(self.direction, other.direction, atol=tol))


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageVolume:
    """Dense scalar volume with physical geometry."""

    meta: GridMeta
    voxels: np.ndarray = field(repr=False)

    def __init__(self, meta: GridMeta, voxels: np.ndarray):
        voxels = np.asarray(voxels, dtype=np.float32)
        if voxels.shape != meta.dims:
            raise ValidationError(
                f"voxel array shape {voxels.shape} does not match dims {meta.dims}")
        if not np.all(np.isfinite(voxels)):
            raise ValidationError("image volume contains non-finite values")
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "voxels", _freeze(voxels))


@dataclass(frozen=True)
class LabelVolume:
    """Dense integer label volume; values come from the registered dictionary."""

    meta: GridMeta
    labels: np.ndarray = field(repr=False)

    def __init__(self, meta: GridMeta, labels: np.ndarray):
        labels = np.asarray(labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError(f"labels must be integer-typed, got {labels.dtype}")
        labels = labels.astype(np.uint8, casting="unsafe")
        if labels.shape != meta.dims:
            raise ValidationError(
                f"label array shape {labels.shape} does not match dims {meta.dims}")
        present = set(np.unique(labels).tolist())
        unknown = present - set(LABEL_NAMES)
        if unknown:
            raise ValidationError(
                f"labels {sorted(unknown)} are not in the registered dictionary "
                f"{sorted(LABEL_NAMES)}")
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "labels", _freeze(labels))

    def label_set(self) -> set[int]:
        return set(int(v) for v in np.unique(self.labels))

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def voxel_to_world(meta: GridMeta, idx) -> np.ndarray:
    """Map (fractional) voxel indices to world mm.

    ``idx`` may be a single (3,) point or an (N, 3) array.
    """
    idx = np.asarray(idx, dtype=np.float64)
    return (idx * meta.spacing) @ meta.direction.T + meta.origin


def world_to_voxel(meta: GridMeta, world) -> np.ndarray:
    """Exact inverse of :func:`voxel_to_world`."""
    world = np.asarray(world, dtype=np.float64)
    return ((world - meta.origin) @ meta.direction) / meta.spacing


def _target_coords_in_source(src_meta: GridMeta, target: GridMeta, xform) -> np.ndarray:
    """Source voxel coordinates, shape (3, nx, ny, nz), for each target voxel.

    ``xform`` maps target-frame world points into the source frame (pull
    convention); ``None`` means identity.
    """
    nx, ny, nz = target.dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64)
    world = voxel_to_world(target, idx)
    if xform is not None:
        world = xform.apply(world)
    src_idx = world_to_voxel(src_meta, world)
    return src_idx.T.reshape(3, nx, ny, nz)


def resample_scalar(src: ImageVolume, target: GridMeta, xform=None,
                    interp: str = "trilinear") -> ImageVolume:
    """Resample ``src`` onto ``target``; out-of-bounds samples fill with 0.

    ``xform`` (a RigidTransform or None) maps target-frame world points to
    source-frame world points.
    """
    if interp not in ("trilinear", "nearest"):
        raise ValidationError(f"unknown interpolation {interp!r}")
    coords = _target_coords_in_source(src.meta, target, xform)
    order = 1 if interp == "trilinear" else 0
    out = ndimage.map_coordinates(src.voxels.astype(np.float64), coords,
                                  order=order, mode="constant", cval=0.0)
    return ImageVolume(target, out.astype(np.float32))


def resample_labels(src: LabelVolume, target: GridMeta, xform=None) -> LabelVolume:
    """Nearest-neighbor label resampling; out-of-bounds fills with background."""
    coords = _target_coords_in_source(src.meta, target, xform)
    out = ndimage.map_coordinates(src.labels, coords, order=0,
                                  mode="constant", cval=0)
    return LabelVolume(target, out)


@dataclass(frozen=True)
class ConnectedComponent:
    """One connected component of a label mask, largest first in listings."""

    voxel_count: int
    mask: np.ndarray = field(repr=False)


def connected_components(vol: LabelVolume, label: int,
                         connectivity: int = 26) -> list[ConnectedComponent]:
    """Connected components of the voxels carrying ``label``.

    Returns components sorted by descending voxel count; an absent label
    yields an empty list.
    """
    if label not in LABEL_NAMES:
        raise ValidationError(f"label {label} is not in the registered dictionary")
    if connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    elif connectivity == 26:
        structure = ndimage.generate_binary_structure(3, 3)
    else:
        raise ValidationError("connectivity must be 6 or 26")
    mask = vol.labels == label
    if not mask.any():
        return []
    labeled, n = ndimage.label(mask, structure=structure)
    comps = [ConnectedComponent(int(np.sum(labeled == i)), labeled == i)
             for i in range(1, n + 1)]
    comps.sort(key=lambda c: -c.voxel_count)
    return comps
