"""Rigid co-registration of the DCE volume onto the T1W grid.

Derivative-free optimization (Nelder-Mead) of an intensity similarity
metric over 6 rigid parameters, run coarse-to-fine over a Gaussian pyramid.
Rotation angles are scaled by 100 mm/radian inside the parameter vector so
one simplex step means roughly the same thing for every coordinate. Voxel
pairs are subsampled with a fixed seed, which keeps a single registration
fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .errors import InsufficientOverlapError, ValidationError
from .transform import RigidTransform
from .volume import GridMeta, ImageVolume, voxel_to_world, world_to_voxel

ANGLE_SCALE_MM = 100.0  # mm of parameter space per radian
MIN_OVERLAP_SAMPLES = 100
MI_BINS = 32


@dataclass(frozen=True)
class RegistrationConfig:
    metric: str = "ncc"
    pyramid_levels: int = 3
    max_iters_per_level: int = 200
    param_tolerance: float = 1e-4
    sample_fraction: float = 0.25
    seed: int = 1234

    def __post_init__(self):
        if self.metric not in ("ncc", "mi"):
            raise ValidationError(f"metric must be 'ncc' or 'mi', got "
                                  f"{self.metric!r}")
        if self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        if not 0 < self.sample_fraction <= 1:
            raise ValidationError("sample_fraction must be in (0, 1]")
        if self.param_tolerance <= 0:
            raise ValidationError("param_tolerance must be > 0")


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform       # maps moving-frame world -> fixed-frame world
    final_metric: float
    iterations_used: tuple[int, ...] = field(default_factory=tuple)
    converged: bool = False


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0:
        return 0.0
    return float(np.dot(a, b) / denom)


def _mutual_information(a: np.ndarray, b: np.ndarray, bins: int = MI_BINS) -> float:
    joint, _, _ = np.histogram2d(a, b, bins=bins)
    total = joint.sum()
    if total == 0:
        return 0.0
    p = joint / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / (px @ py)[mask])))


def _metric_value(metric: str, a: np.ndarray, b: np.ndarray) -> float:
    return _ncc(a, b) if metric == "ncc" else _mutual_information(a, b)


def _sample_world_points(meta: GridMeta, fraction: float,
                         rng: np.random.Generator):
    total = meta.voxel_count
    k = max(int(np.ceil(total * fraction)), 1)
    flat = rng.choice(total, size=k, replace=False)
    idx = np.stack(np.unravel_index(flat, meta.dims), axis=1).astype(np.float64)
    return flat, voxel_to_world(meta, idx)


def _moving_values(moving: ImageVolume, world_points: np.ndarray):
    coords = world_to_voxel(moving.meta, world_points)
    limits = np.asarray(moving.meta.dims, dtype=np.float64) - 1.0
    in_bounds = np.all((coords >= 0.0) & (coords <= limits), axis=1)
    values = ndimage.map_coordinates(moving.voxels.astype(np.float64),
                                     coords.T, order=1, mode="constant",
                                     cval=0.0)
    return values, in_bounds


def similarity(fixed: ImageVolume, moving: ImageVolume,
               xform: RigidTransform | None = None, metric: str = "ncc",
               sample_fraction: float = 0.25, seed: int = 1234) -> float:
    """Similarity between ``fixed`` and ``moving`` under a candidate transform.

    ``xform`` maps fixed-frame world points into the moving frame (the pull
    direction used for resampling). Voxels are subsampled deterministically
    from ``seed``.
    """
    if metric not in ("ncc", "mi"):
        raise ValidationError(f"metric must be 'ncc' or 'mi', got {metric!r}")
    rng = np.random.default_rng(seed)
    flat, world = _sample_world_points(fixed.meta, sample_fraction, rng)
    if xform is not None:
        world = xform.apply(world)
    values, in_bounds = _moving_values(moving, world)
    n = int(in_bounds.sum())
    if n < MIN_OVERLAP_SAMPLES:
        raise InsufficientOverlapError(
            f"only {n} overlapping samples (need {MIN_OVERLAP_SAMPLES})")
    fixed_vals = fixed.voxels.reshape(-1)[flat][in_bounds].astype(np.float64)
    return _metric_value(metric, fixed_vals, values[in_bounds])


def _downsample(vol: ImageVolume, factor: int) -> ImageVolume:
    if factor == 1:
        return vol
    smoothed = ndimage.gaussian_filter(vol.voxels.astype(np.float64),
                                       sigma=factor / 2.0, mode="nearest")
    sub = smoothed[::factor, ::factor, ::factor]
    meta = GridMeta(sub.shape, vol.meta.spacing * factor, vol.meta.origin,
                    vol.meta.direction)
    return ImageVolume(meta, sub.astype(np.float32))


def _params_to_transform(params: np.ndarray, center) -> RigidTransform:
    return RigidTransform(
        angles=tuple(np.asarray(params[:3]) / ANGLE_SCALE_MM),
        translation=tuple(params[3:6]),
        center=tuple(center))


def register_rigid(fixed: ImageVolume, moving: ImageVolume,
                   cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Recover the rigid transform mapping moving-frame world coordinates
    onto the fixed frame.

    Internally optimizes the pull transform (fixed -> moving); the inverse
    is returned so downstream fusion can take the result at face value.
    """
    cfg = cfg or RegistrationConfig()
    center = fixed.meta.center_world()
    params = np.zeros(6)
    iterations: list[int] = []
    converged = False
    final_metric = 0.0

    for level in range(cfg.pyramid_levels - 1, -1, -1):
        factor = 2 ** level
        fixed_level = _downsample(fixed, factor)
        moving_level = _downsample(moving, factor)
        rng = np.random.default_rng(cfg.seed + level)
        flat, world = _sample_world_points(fixed_level.meta,
                                           cfg.sample_fraction, rng)
        fixed_vals = fixed_level.voxels.reshape(-1)[flat].astype(np.float64)
        overlap_failure: dict = {}

        def objective(p, _world=world, _fixed_vals=fixed_vals,
                      _moving=moving_level, _level=level):
            xf = _params_to_transform(p, center)
            values, in_bounds = _moving_values(_moving, xf.apply(_world))
            n = int(in_bounds.sum())
            if n < MIN_OVERLAP_SAMPLES:
                overlap_failure["n"] = n
                return np.inf
            return -_metric_value(cfg.metric, _fixed_vals[in_bounds],
                                  values[in_bounds])

        if not np.isfinite(objective(params)):
            raise InsufficientOverlapError(
                f"only {overlap_failure.get('n', 0)} overlapping samples "
                f"(need {MIN_OVERLAP_SAMPLES})", level=level)

        step = factor * float(np.mean(fixed.meta.spacing))
        simplex = np.vstack([params] + [params + step * basis
                                        for basis in np.eye(6)])
        result = optimize.minimize(
            objective, params, method="Nelder-Mead",
            options={"initial_simplex": simplex,
                     "xatol": cfg.param_tolerance,
                     "fatol": np.inf,
                     "maxiter": cfg.max_iters_per_level,
                     "maxfev": 40 * cfg.max_iters_per_level,
                     "disp": False})
        params = np.asarray(result.x, dtype=np.float64)
        iterations.append(int(result.nit))
        converged = bool(result.status == 0)
        final_metric = -float(result.fun)

    pull = _params_to_transform(params, center)
    return RegistrationResult(transform=pull.inverse(),
                              final_metric=final_metric,
                              iterations_used=tuple(iterations),
                              converged=converged)
