"""Segmentation three ways: classical baselines, an external-backend protocol,
and three-slice-to-3D lesion completion.

The baselines exist so the whole pipeline is testable without any trained
model; real models plug in through the file-based backend protocol
(``run_backend``), which writes an input volume plus request JSON into a
fresh work directory, invokes ``<executable> --workdir <dir>``, and
validates whatever comes back.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BackendError,
    ProtocolViolationError,
    ValidationError,
)
from .nifti import read_nifti, write_nifti
from .volume import (
    LABEL_FIBROGLANDULAR,
    LABEL_LESION,
    LABEL_NAMES,
    LABEL_WHOLE_BREAST,
    GridMeta,
    ImageVolume,
    LabelVolume,
    connected_components,
)

PROTOCOL_VERSION = 1


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Classic Otsu threshold maximizing between-class variance."""
    hist, edges = np.histogram(values.ravel(), bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight = hist.astype(np.float64)
    total = weight.sum()
    if total == 0:
        return float(centers[0])
    w0 = np.cumsum(weight)
    w1 = total - w0
    m = np.cumsum(weight * centers)
    mean0 = np.divide(m, w0, out=np.zeros_like(m), where=w0 > 0)
    mean1 = np.divide(m[-1] - m, w1, out=np.zeros_like(m), where=w1 > 0)
    var_between = w0 * w1 * (mean0 - mean1) ** 2
    # separated modes leave a plateau of equally good splits; take its middle
    best = np.flatnonzero(var_between == var_between.max())
    return float(centers[(best[0] + best[-1]) // 2])


def _chest_wall_index(voxels: np.ndarray) -> tuple[int, bool]:
    """Index of the maximal mean-intensity jump along y, and whether the
    bright (chest) side lies at higher y."""
    profile = voxels.mean(axis=(0, 2))
    jumps = np.diff(profile)
    k = int(np.argmax(np.abs(jumps)))
    chest_at_high_y = jumps[k] > 0
    return k, chest_at_high_y


def segment_baseline_breast(t1w: ImageVolume) -> LabelVolume:
    """Classical whole-breast + fibroglandular segmentation of normalized T1W.

    Otsu separates tissue from air; the chest wall is modeled as the plane
    of maximal axial mean-intensity gradient, and the largest connected
    component anterior to it becomes the whole-breast label. A second Otsu
    inside the breast splits dark fibroglandular tissue from bright fat.
    """
    voxels = t1w.voxels
    thr = otsu_threshold(voxels)
    foreground = voxels > thr
    if not foreground.any() or foreground.all():
        raise ValidationError("no anatomy detected: thresholding found no "
                              "tissue/air separation")

    wall, chest_at_high_y = _chest_wall_index(voxels)
    anterior = np.zeros_like(foreground)
    # the gradient slab itself is wall partial volume, so stay a slice clear
    if chest_at_high_y:
        anterior[:, :wall, :] = True
    else:
        anterior[:, wall + 2:, :] = True
    candidates = foreground & anterior
    if not candidates.any():
        raise ValidationError("no anatomy detected anterior to the chest wall")

    seed = LabelVolume(t1w.meta, candidates.astype(np.uint8))
    breast = connected_components(seed, 1, connectivity=26)[0].mask
    # dark fibroglandular tissue thresholds like background; it is enclosed
    # by fat, so closing interior holes recovers the whole breast
    breast = ndimage.binary_fill_holes(breast)

    labels = np.zeros(t1w.meta.dims, dtype=np.uint8)
    labels[breast] = LABEL_WHOLE_BREAST
    # skin-line voxels are air/fat partial volume and read as "dark"; keep
    # the fat/fibroglandular split away from them
    interior = ndimage.binary_erosion(breast, iterations=2)
    if interior.any():
        split = otsu_threshold(voxels[interior])
        fibro = interior & (voxels < split)
        labels[fibro] = LABEL_FIBROGLANDULAR
    return LabelVolume(t1w.meta, labels)


def segment_baseline_lesion(dce: ImageVolume, seed_voxel, threshold_delta: float) -> LabelVolume:
    """Region-grown lesion mask from a seed in a normalized DCE volume.

    Grows 26-connected from ``seed_voxel`` over voxels whose intensity is
    within ``threshold_delta`` of the seed intensity.
    """
    seed = tuple(int(v) for v in np.asarray(seed_voxel).reshape(3))
    dims = dce.meta.dims
    if not all(0 <= seed[i] < dims[i] for i in range(3)):
        raise ValidationError(f"seed {seed} outside volume dims {dims}")
    if threshold_delta < 0:
        raise ValidationError("threshold_delta must be >= 0")
    voxels = dce.voxels
    seed_val = float(voxels[seed])
    if seed_val <= otsu_threshold(voxels):
        raise ValidationError("seed in background: seed intensity below the "
                              "global foreground threshold")
    candidate = np.abs(voxels - seed_val) <= threshold_delta
    structure = ndimage.generate_binary_structure(3, 3)
    comp, _ = ndimage.label(candidate, structure=structure)
    region = comp == comp[seed]
    labels = np.where(region, LABEL_LESION, 0).astype(np.uint8)
    return LabelVolume(dce.meta, labels)


@dataclass(frozen=True)
class SliceAnnotation:
    """One manually annotated axial slice of a lesion."""

    slice_index: int
    mask2d: np.ndarray = field(repr=False)
    axis: str = "axial"

    def __post_init__(self):
        if self.axis != "axial":
            raise ValidationError(f"only axial annotations are supported, "
                                  f"got {self.axis!r}")
        mask = np.asarray(self.mask2d).astype(bool)
        if mask.ndim != 2:
            raise ValidationError("mask2d must be a 2-D array")
        if not mask.any():
            raise ValidationError("mask2d must be non-empty")
        object.__setattr__(self, "mask2d", mask)


def _signed_distance_2d(mask: np.ndarray, sampling) -> np.ndarray:
    """Signed Euclidean distance field, negative inside the mask."""
    outside = ndimage.distance_transform_edt(~mask, sampling=sampling)
    inside = ndimage.distance_transform_edt(mask, sampling=sampling)
    return outside - inside


def _blend_weight(tau: float, r_a: float, r_b: float, profile: str) -> float:
    """Interpolation weight for slice fraction ``tau`` between two annotations.

    ``linear`` blends signed distance fields uniformly in slice position,
    which interpolates equivalent radii linearly. ``elliptic`` (default)
    eases the weight so equivalent radii follow an elliptical arc with its
    equator at the wider annotation; rounded lesion caps bracketed by their
    widest and last slices are reproduced far more faithfully that way.
    """
    if profile == "linear" or abs(r_a - r_b) < 1e-12:
        return tau
    if r_a > r_b:
        r_mid = np.sqrt(max(r_a * r_a - (r_a * r_a - r_b * r_b) * tau * tau, 0.0))
    else:
        r_mid = np.sqrt(max(r_b * r_b - (r_b * r_b - r_a * r_a) * (1.0 - tau) ** 2,
                            0.0))
    return float((r_a - r_mid) / (r_a - r_b))


def complete_from_slices(annotations, target: GridMeta,
                         profile: str = "elliptic") -> LabelVolume:
    """Lift sparse axial slice annotations to a full 3-D lesion mask.

    Each annotated slice contributes its 2-D signed distance field; every
    intermediate slice thresholds a blend of the two bracketing fields.
    Annotated slices reproduce their input masks exactly and slices outside
    the annotated extent stay empty.
    """
    if profile not in ("elliptic", "linear"):
        raise ValidationError(f"unknown interpolation profile {profile!r}")
    annotations = sorted(annotations, key=lambda a: a.slice_index)
    if len(annotations) < 2:
        raise ValidationError("insufficient annotations: need at least 2 "
                              "on distinct slices")
    indices = [a.slice_index for a in annotations]
    if len(set(indices)) != len(indices):
        raise ValidationError(f"overlapping slice indices: {indices}")
    nx, ny, nz = target.dims
    for ann in annotations:
        if not 0 <= ann.slice_index < nz:
            raise ValidationError(
                f"slice index {ann.slice_index} outside volume (nz={nz})")
        if ann.mask2d.shape != (nx, ny):
            raise ValidationError(
                f"annotation mask shape {ann.mask2d.shape} does not match "
                f"in-plane dims {(nx, ny)}")

    sampling = target.spacing[:2]
    sdf = {a.slice_index: _signed_distance_2d(a.mask2d, sampling)
           for a in annotations}
    radius = {a.slice_index: float(np.sqrt(a.mask2d.sum() / np.pi))
              for a in annotations}

    out = np.zeros(target.dims, dtype=np.uint8)
    for ann in annotations:
        out[:, :, ann.slice_index] = np.where(ann.mask2d, LABEL_LESION, 0)
    for a, b in zip(annotations[:-1], annotations[1:]):
        za, zb = a.slice_index, b.slice_index
        for z in range(za + 1, zb):
            tau = (z - za) / (zb - za)
            w = _blend_weight(tau, radius[za], radius[zb], profile)
            blended = (1.0 - w) * sdf[za] + w * sdf[zb]
            out[:, :, z] = np.where(blended < 0, LABEL_LESION, 0)
    return LabelVolume(target, out)


@dataclass(frozen=True)
class BackendDescriptor:
    """How to invoke one external segmentation backend."""

    name: str
    executable: str
    model_id: str
    timeout_s: int = 300
    expected_labels: frozenset[int] = frozenset({LABEL_WHOLE_BREAST,
                                                 LABEL_FIBROGLANDULAR,
                                                 LABEL_LESION})

    def __post_init__(self):
        object.__setattr__(self, "expected_labels",
                           frozenset(int(l) for l in self.expected_labels))
        unknown = self.expected_labels - set(LABEL_NAMES)
        if unknown:
            raise ValidationError(
                f"expected_labels {sorted(unknown)} not in the label dictionary")
        if self.timeout_s <= 0:
            raise ValidationError("timeout_s must be positive")


# one semaphore per backend name throttles heavyweight model processes
_BACKEND_SEMAPHORES: dict[str, threading.Semaphore] = {}
_SEM_GUARD = threading.Lock()
DEFAULT_BACKEND_CONCURRENCY = 1


def _backend_semaphore(name: str) -> threading.Semaphore:
    with _SEM_GUARD:
        if name not in _BACKEND_SEMAPHORES:
            _BACKEND_SEMAPHORES[name] = threading.Semaphore(
                DEFAULT_BACKEND_CONCURRENCY)
        return _BACKEND_SEMAPHORES[name]


def _as_label_volume(vol) -> LabelVolume:
    if isinstance(vol, LabelVolume):
        return vol
    values = vol.voxels
    if not np.all(values == np.round(values)):
        raise ProtocolViolationError(
            "backend output.nii holds non-integer values")
    return LabelVolume(vol.meta, np.round(values).astype(np.uint8))


def run_backend(desc: BackendDescriptor, volume: ImageVolume, request_labels,
                case_id: str = "", workdir_root=None) -> LabelVolume:
    """Run one backend process over one volume through the file protocol.

    The exchange directory is deleted on success and retained on failure
    (its path travels on the raised error) so failed runs can be inspected.
    """
    executable = Path(desc.executable)
    if not executable.exists():
        raise ValidationError(f"backend executable not found: {executable}")
    request_labels = sorted(int(l) for l in request_labels)
    bad = set(request_labels) - desc.expected_labels
    if bad:
        raise ValidationError(
            f"requested labels {sorted(bad)} not offered by backend "
            f"{desc.name!r} (expects {sorted(desc.expected_labels)})")

    workdir = Path(tempfile.mkdtemp(prefix=f"{desc.name}-",
                                    dir=workdir_root))
    write_nifti(volume, workdir / "input.nii")
    request = {
        "protocol_version": PROTOCOL_VERSION,
        "model_id": desc.model_id,
        "labels_requested": request_labels,
        "case_id": case_id,
    }
    with open(workdir / "request.json", "w", encoding="utf-8") as fh:
        json.dump(request, fh, indent=2)
    # grid as the backend will see it (float32 header round-trip)
    reference_meta = read_nifti(workdir / "input.nii").meta

    try:
        with _backend_semaphore(desc.name):
            try:
                proc = subprocess.run(
                    [str(executable), "--workdir", str(workdir)],
                    capture_output=True, text=True, timeout=desc.timeout_s)
            except subprocess.TimeoutExpired as exc:
                raise BackendError(
                    f"backend {desc.name!r} timed out after {desc.timeout_s}s",
                    workdir=str(workdir),
                    diagnostics=str(exc.stderr or "")) from exc

        response_path = workdir / "response.json"
        response = None
        if response_path.exists():
            try:
                with open(response_path, "r", encoding="utf-8") as fh:
                    response = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ProtocolViolationError(
                    f"backend {desc.name!r} wrote unparseable response.json: {exc}",
                    workdir=str(workdir)) from exc

        if proc.returncode != 0:
            message = (response or {}).get("message", "")
            raise BackendError(
                f"backend {desc.name!r} exited with code {proc.returncode}"
                + (f": {message}" if message else ""),
                workdir=str(workdir), diagnostics=proc.stderr)
        if response is None:
            raise ProtocolViolationError(
                f"backend {desc.name!r} wrote no response.json",
                workdir=str(workdir), diagnostics=proc.stderr)
        if response.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolViolationError(
                f"backend {desc.name!r} answered protocol version "
                f"{response.get('protocol_version')!r}, expected {PROTOCOL_VERSION}",
                workdir=str(workdir))
        if response.get("status") != "ok":
            raise BackendError(
                f"backend {desc.name!r} reported status "
                f"{response.get('status')!r}: {response.get('message', '')}",
                workdir=str(workdir), diagnostics=proc.stderr)

        output_path = workdir / "output.nii"
        if not output_path.exists():
            raise ProtocolViolationError(
                f"backend {desc.name!r} wrote no output.nii",
                workdir=str(workdir))
        mask = _as_label_volume(read_nifti(output_path))
        if not mask.meta.same_grid(reference_meta, tol=1e-5):
            raise ProtocolViolationError(
                f"backend {desc.name!r} returned a mask on a different grid "
                f"(dims {mask.meta.dims} vs {reference_meta.dims})",
                workdir=str(workdir))
        emitted = mask.label_set() - {0}
        outside = emitted - desc.expected_labels
        if outside:
            raise ProtocolViolationError(
                f"backend {desc.name!r} emitted labels {sorted(outside)} "
                f"outside expected {sorted(desc.expected_labels)}",
                workdir=str(workdir))
        declared = response.get("labels_emitted")
        if declared is not None and not emitted <= set(int(l) for l in declared):
            raise ProtocolViolationError(
                f"backend {desc.name!r} mask labels {sorted(emitted)} do not "
                f"match declared labels_emitted {declared}",
                workdir=str(workdir))
    except Exception:
        # keep the exchange directory for debugging
        raise
    else:
        shutil.rmtree(workdir, ignore_errors=True)
        return mask
