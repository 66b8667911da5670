"""Synthetic breast phantom cases with exact ground-truth masks.

Each case is an analytic world-space scene (chest slab, breast ellipsoid,
fibroglandular core, bright DCE lesion) rendered onto a voxel grid. Edges
are rendered with a ~1.6 mm partial-volume ramp and tissue carries a
world-anchored sinusoidal texture, so intensity volumes behave like real
acquisitions under resampling and registration. Ground-truth masks stay
crisp indicator functions of the same analytic shapes, and the DCE volume
is rendered under a known rigid misalignment, giving every later stage an
exact oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .manifest import CaseManifest
from .nifti import write_nifti
from .transform import RigidTransform
from .volume import (
    LABEL_FIBROGLANDULAR,
    LABEL_LESION,
    LABEL_WHOLE_BREAST,
    GridMeta,
    ImageVolume,
    LabelVolume,
    voxel_to_world,
)

# display intensities (already normalized to [0, 1])
T1W_AIR = 0.0
T1W_CHEST = 0.70
T1W_FAT = 0.80
T1W_FIBRO = 0.30
DCE_AIR = 0.0
DCE_TISSUE = 0.35
DCE_LESION = 0.90

EDGE_WIDTH_MM = 1.6     # partial-volume ramp width
LESION_EDGE_WIDTH_MM = 0.8
NOISE_AMPLITUDE = 0.015

DEFAULT_DIMS = (56, 56, 40)
DEFAULT_SPACING = (1.5, 1.5, 1.5)


def _ramp(signed_distance_mm: np.ndarray) -> np.ndarray:
    """0 outside, 1 inside, linear across EDGE_WIDTH_MM around the surface."""
    return np.clip(signed_distance_mm / EDGE_WIDTH_MM + 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class PhantomScene:
    """Analytic description of one case's anatomy in world millimetres."""

    wall_y_mm: float
    breast_center: np.ndarray
    breast_axes: np.ndarray
    core_center: np.ndarray
    core_axes: np.ndarray
    lesion_center: np.ndarray
    lesion_radius_mm: float
    texture_freq: np.ndarray    # (k, 3) rad/mm
    texture_phase: np.ndarray   # (k,)
    texture_amp: np.ndarray     # (k,)

    # crisp truth predicates ------------------------------------------------
    def breast(self, pts: np.ndarray) -> np.ndarray:
        q = (pts - self.breast_center) / self.breast_axes
        return np.einsum("...i,...i->...", q, q) <= 1.0

    def core(self, pts: np.ndarray) -> np.ndarray:
        q = (pts - self.core_center) / self.core_axes
        return np.einsum("...i,...i->...", q, q) <= 1.0

    def lesion(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.lesion_center
        return np.einsum("...i,...i->...", d, d) <= self.lesion_radius_mm ** 2

    def chest(self, pts: np.ndarray) -> np.ndarray:
        return pts[..., 1] >= self.wall_y_mm

    def anterior(self, pts: np.ndarray) -> np.ndarray:
        return pts[..., 1] < self.wall_y_mm

    # smooth partial-volume fractions ---------------------------------------
    def _ellipsoid_fraction(self, pts, center, axes) -> np.ndarray:
        q = (pts - center) / axes
        radial = np.sqrt(np.einsum("...i,...i->...", q, q))
        r_eff = 3.0 / float(np.sum(1.0 / axes))
        return _ramp((1.0 - radial) * r_eff)

    def breast_fraction(self, pts) -> np.ndarray:
        return self._ellipsoid_fraction(pts, self.breast_center, self.breast_axes)

    def core_fraction(self, pts) -> np.ndarray:
        return self._ellipsoid_fraction(pts, self.core_center, self.core_axes)

    def lesion_fraction(self, pts) -> np.ndarray:
        # enhancing lesions show sharper margins than parenchyma
        d = pts - self.lesion_center
        radius = np.sqrt(np.einsum("...i,...i->...", d, d))
        return np.clip((self.lesion_radius_mm - radius) / LESION_EDGE_WIDTH_MM
                       + 0.5, 0.0, 1.0)

    def chest_fraction(self, pts) -> np.ndarray:
        return _ramp(pts[..., 1] - self.wall_y_mm)

    def texture(self, pts: np.ndarray) -> np.ndarray:
        """World-anchored smooth tissue texture; it rotates with the anatomy,
        which is what makes orientation recoverable by registration."""
        out = np.zeros(pts.shape[:-1])
        for freq, phase, amp in zip(self.texture_freq, self.texture_phase,
                                    self.texture_amp):
            out += amp * np.sin(pts @ freq + phase)
        return out


@dataclass(frozen=True)
class PhantomCase:
    case_id: str
    t1w: ImageVolume
    dce: ImageVolume
    truth_t1w: LabelVolume         # {0, whole-breast, fibroglandular} on the T1W grid
    truth_lesion_dce: LabelVolume  # {0, lesion} on the DCE grid
    truth_fused: LabelVolume       # all labels on the T1W grid
    dce_to_t1w: RigidTransform     # true alignment (moving -> fixed world)
    lesion_seed_dce: tuple[int, int, int]
    scene: PhantomScene


def world_grid(meta: GridMeta) -> np.ndarray:
    """World coordinates of every voxel center, shape dims + (3,)."""
    nx, ny, nz = meta.dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
    return voxel_to_world(meta, idx).reshape(nx, ny, nz, 3)


def _smooth_noise(rng: np.random.Generator, dims, amplitude: float) -> np.ndarray:
    rough = rng.normal(0.0, 1.0, size=dims)
    smooth = ndimage.gaussian_filter(rough, sigma=1.2)
    scale = np.max(np.abs(smooth))
    return (smooth / scale * amplitude) if scale > 0 else smooth


def make_scene(seed_or_rng, meta: GridMeta) -> PhantomScene:
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    extent = np.asarray(meta.dims) * meta.spacing
    wall_y = 0.64 * extent[1] + rng.uniform(-2.0, 2.0)
    axes = np.array([
        rng.uniform(0.24, 0.30) * extent[0],
        rng.uniform(0.26, 0.32) * extent[1],
        rng.uniform(0.24, 0.30) * extent[2],
    ])
    center = np.array([
        0.5 * extent[0] + rng.uniform(-2.0, 2.0),
        wall_y - 0.85 * axes[1],
        0.5 * extent[2] + rng.uniform(-2.0, 2.0),
    ])
    core_axes = axes * rng.uniform(0.48, 0.58)
    core_center = center + rng.uniform(-1.5, 1.5, size=3)
    lesion_radius = rng.uniform(5.0, 8.0)
    offset = rng.uniform(-0.35, 0.35, size=3) * axes
    lesion_center = center + offset
    n_waves = 4
    freq = rng.uniform(0.15, 0.45, size=(n_waves, 3)) * rng.choice(
        [-1.0, 1.0], size=(n_waves, 3))
    phase = rng.uniform(0, 2 * np.pi, size=n_waves)
    amp = rng.uniform(0.012, 0.025, size=n_waves)
    return PhantomScene(wall_y_mm=float(wall_y), breast_center=center,
                        breast_axes=axes, core_center=core_center,
                        core_axes=core_axes, lesion_center=lesion_center,
                        lesion_radius_mm=float(lesion_radius),
                        texture_freq=freq, texture_phase=phase,
                        texture_amp=amp)


def render_t1w(scene: PhantomScene, meta: GridMeta,
               xform: RigidTransform | None = None,
               noise_rng: np.random.Generator | None = None) -> ImageVolume:
    """Render the T1W scene; ``xform`` maps grid world points to anatomy
    positions (a misaligned acquisition of the same patient)."""
    pts = world_grid(meta)
    if xform is not None:
        pts = xform.apply(pts.reshape(-1, 3)).reshape(pts.shape)
    f_chest = scene.chest_fraction(pts)
    f_breast = scene.breast_fraction(pts)
    f_core = scene.core_fraction(pts)
    v = np.full(pts.shape[:-1], T1W_AIR)
    v += f_chest * (T1W_CHEST - v)
    v += f_breast * (T1W_FAT - v)
    v += f_core * f_breast * (T1W_FIBRO - v)
    tissue = np.maximum(f_chest, f_breast)
    v += scene.texture(pts) * tissue
    if noise_rng is not None:
        v += _smooth_noise(noise_rng, meta.dims, NOISE_AMPLITUDE) * tissue
    return ImageVolume(meta, np.clip(v, 0.0, 1.0).astype(np.float32))


def render_dce(scene: PhantomScene, meta: GridMeta,
               xform: RigidTransform | None = None,
               noise_rng: np.random.Generator | None = None) -> ImageVolume:
    pts = world_grid(meta)
    if xform is not None:
        pts = xform.apply(pts.reshape(-1, 3)).reshape(pts.shape)
    f_tissue = np.maximum(scene.chest_fraction(pts), scene.breast_fraction(pts))
    f_lesion = scene.lesion_fraction(pts)
    v = np.full(pts.shape[:-1], DCE_AIR)
    v += f_tissue * (DCE_TISSUE - v)
    v += f_lesion * (DCE_LESION - v)
    support = np.maximum(f_tissue, f_lesion)
    v += scene.texture(pts) * support
    if noise_rng is not None:
        v += _smooth_noise(noise_rng, meta.dims, NOISE_AMPLITUDE) * support
    return ImageVolume(meta, np.clip(v, 0.0, 1.0).astype(np.float32))


def generate_case(case_id: str, seed: int, dims=DEFAULT_DIMS,
                  spacing=DEFAULT_SPACING, misalign: bool = True) -> PhantomCase:
    """Build one deterministic phantom case from a seed."""
    rng = np.random.default_rng(seed)
    meta = GridMeta(dims, spacing)
    scene = make_scene(rng, meta)
    world = world_grid(meta)

    t1w = render_t1w(scene, meta, noise_rng=rng)

    breast = scene.breast(world) & scene.anterior(world)
    core = scene.core(world) & scene.anterior(world)
    truth_t1w = np.zeros(meta.dims, dtype=np.uint8)
    truth_t1w[breast] = LABEL_WHOLE_BREAST
    truth_t1w[breast & core] = LABEL_FIBROGLANDULAR

    # true patient motion between sequences (DCE world -> T1W world)
    if misalign:
        dce_to_t1w = RigidTransform(
            angles=tuple(rng.uniform(-np.radians(2.0), np.radians(2.0), 3)),
            translation=tuple(rng.uniform(-3.0, 3.0, 3)),
            center=tuple(meta.center_world()))
    else:
        dce_to_t1w = RigidTransform(center=tuple(meta.center_world()))

    dce = render_dce(scene, meta, xform=dce_to_t1w, noise_rng=rng)
    dce_world = dce_to_t1w.apply(world.reshape(-1, 3)).reshape(world.shape)
    truth_lesion = np.where(scene.lesion(dce_world), LABEL_LESION,
                            0).astype(np.uint8)

    truth_fused = truth_t1w.copy()
    truth_fused[scene.lesion(world)] = LABEL_LESION

    seed_world = dce_to_t1w.inverse().apply(scene.lesion_center)
    seed_idx = np.round(
        np.clip((seed_world - meta.origin) / meta.spacing,
                0, np.asarray(meta.dims) - 1)).astype(int)

    return PhantomCase(
        case_id=case_id,
        t1w=t1w,
        dce=dce,
        truth_t1w=LabelVolume(meta, truth_t1w),
        truth_lesion_dce=LabelVolume(meta, truth_lesion),
        truth_fused=LabelVolume(meta, truth_fused),
        dce_to_t1w=dce_to_t1w,
        lesion_seed_dce=tuple(int(v) for v in seed_idx),
        scene=scene,
    )


def write_case(case: PhantomCase, dataset_root) -> Path:
    """Persist one case as a standard case directory with manifest + truths."""
    case_dir = Path(dataset_root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(case.t1w, case_dir / "t1w.nii")
    write_nifti(case.dce, case_dir / "dce.nii")
    write_nifti(case.truth_t1w, case_dir / "truth_t1w.nii")
    write_nifti(case.truth_lesion_dce, case_dir / "truth_lesion_dce.nii")
    write_nifti(case.truth_fused, case_dir / "truth_fused.nii")
    case.dce_to_t1w.save(case_dir / "truth_transform.json")
    manifest = CaseManifest(
        case_id=case.case_id,
        sequences={"t1w": "t1w.nii", "dce": "dce.nii"},
        masks={"truth_t1w": "truth_t1w.nii",
               "truth_lesion_dce": "truth_lesion_dce.nii",
               "truth_fused": "truth_fused.nii"},
        notes=(f"synthetic phantom; lesion seed (dce grid) "
               f"{case.lesion_seed_dce}"),
    )
    manifest.save(case_dir / "manifest.json")
    return case_dir


def generate_dataset(dataset_root, n_cases: int, seed: int,
                     dims=DEFAULT_DIMS, spacing=DEFAULT_SPACING) -> list[Path]:
    """Write ``n_cases`` deterministic cases under ``dataset_root``."""
    paths = []
    for i in range(n_cases):
        case = generate_case(f"phantom{i + 1:03d}", seed=seed + i,
                             dims=dims, spacing=spacing)
        paths.append(write_case(case, dataset_root))
    return paths
