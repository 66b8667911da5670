"""Per-case pipeline stages wired over the case store.

Each stage is idempotent: when its outputs already exist it does nothing
unless forced, so re-running the pipeline over a store is cheap and
deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import StateError, ValidationError
from .evaluation import MetricReport, evaluate_cohort
from .fusion import fuse_labels
from .hitl import CaseStore, stage_index
from .mesh import export_scene, marching_cubes, smooth_taubin
from .nifti import read_nifti, write_nifti
from .preprocess import denoise_gaussian, normalize_percentile
from .registration import register_rigid
from .segmentation import (
    SliceAnnotation,
    complete_from_slices,
    run_backend,
    segment_baseline_breast,
    segment_baseline_lesion,
)
from .transform import RigidTransform
from .volume import LABEL_LESION, ImageVolume, LabelVolume

PREPROCESSED = {"t1w": "t1w_pre.nii", "dce": "dce_pre.nii"}
TRANSFORM_FILE = "transform.json"
FUSED_FILE = "fused.nii"
FUSION_STATS_FILE = "fusion.json"
MESH_DIR = "meshes"


@dataclass
class StageOutcome:
    case_id: str
    stage: str
    skipped: bool
    detail: str = ""


def _outputs_exist(case_dir: Path, names) -> bool:
    return all((case_dir / name).exists() for name in names)


def _mark_stage(store: CaseStore, case_id: str, stage: str) -> None:
    """Advance the case stage monotonically; re-runs never move it back."""
    if stage_index(store.load_record(case_id).stage) < stage_index(stage):
        store.advance_stage(case_id, stage)


def stage_preprocess(store: CaseStore, case_id: str, config: PipelineConfig,
                     force: bool = False) -> StageOutcome:
    case_dir = store.case_dir(case_id)
    if not force and _outputs_exist(case_dir, PREPROCESSED.values()):
        return StageOutcome(case_id, "preprocessed", skipped=True,
                            detail="outputs up to date")
    record = store.load_record(case_id)
    for key, out_name in PREPROCESSED.items():
        rel = record.manifest.sequences.get(key)
        if rel is None:
            raise StateError(f"case {case_id} has no {key} sequence")
        volume = read_nifti(case_dir / rel)
        if not isinstance(volume, ImageVolume):
            raise ValidationError(f"{rel} is not a scalar volume")
        smoothed = denoise_gaussian(volume, config.preprocess.sigma_mm)
        p_low, p_high = config.preprocess.percentiles_for(key)
        result = normalize_percentile(smoothed, p_low, p_high)
        write_nifti(result.volume, case_dir / out_name)
    _mark_stage(store, case_id, "preprocessed")
    return StageOutcome(case_id, "preprocessed", skipped=False)


def _require_preprocessed(case_dir: Path, case_id: str) -> None:
    missing = [n for n in PREPROCESSED.values() if not (case_dir / n).exists()]
    if missing:
        raise StateError(f"case {case_id}: run preprocess first "
                         f"(missing {', '.join(missing)})")


def stage_register(store: CaseStore, case_id: str, config: PipelineConfig,
                   force: bool = False) -> StageOutcome:
    case_dir = store.case_dir(case_id)
    out = case_dir / TRANSFORM_FILE
    if not force and out.exists():
        return StageOutcome(case_id, "registered", skipped=True,
                            detail="transform up to date")
    _require_preprocessed(case_dir, case_id)
    fixed = read_nifti(case_dir / PREPROCESSED["t1w"])
    moving = read_nifti(case_dir / PREPROCESSED["dce"])
    result = register_rigid(fixed, moving, config.registration)
    result.transform.save(out)
    with open(case_dir / "registration.json", "w", encoding="utf-8") as fh:
        json.dump({"final_metric": result.final_metric,
                   "iterations_used": list(result.iterations_used),
                   "converged": result.converged}, fh, indent=2)
        fh.write("\n")
    _mark_stage(store, case_id, "registered")
    return StageOutcome(case_id, "registered", skipped=False,
                        detail=f"metric {result.final_metric:.4f}")


def _brightest_voxel(volume: ImageVolume) -> tuple[int, int, int]:
    flat = int(np.argmax(volume.voxels))
    return tuple(int(v) for v in np.unravel_index(flat, volume.meta.dims))


def stage_segment(store: CaseStore, case_id: str, config: PipelineConfig,
                  backend: str | None = None, seed_voxel=None,
                  force: bool = False) -> StageOutcome:
    case_dir = store.case_dir(case_id)
    have_masks = (store.mask_path(case_id, "anatomy").exists()
                  and store.mask_path(case_id, "lesion").exists())
    if not force and have_masks:
        return StageOutcome(case_id, "auto_segmented", skipped=True,
                            detail="masks up to date")
    if backend is not None:
        config.backend(backend)  # fail fast on unknown backend names
    _require_preprocessed(case_dir, case_id)
    t1w = read_nifti(case_dir / PREPROCESSED["t1w"])
    dce = read_nifti(case_dir / PREPROCESSED["dce"])
    if backend is None:
        anatomy = segment_baseline_breast(t1w)
        seed = tuple(seed_voxel) if seed_voxel else _brightest_voxel(dce)
        lesion = segment_baseline_lesion(dce, seed,
                                         config.segmentation.lesion_delta)
        source = "baseline"
    else:
        desc = config.backend(backend)
        anatomy = run_backend(desc, t1w, sorted(desc.expected_labels - {3}),
                              case_id=case_id)
        lesion = run_backend(desc, dce, [LABEL_LESION], case_id=case_id)
        source = f"backend:{backend}"
    store.set_mask(case_id, anatomy, "pipeline", f"auto_segment:{source}",
                   channel="anatomy")
    store.set_mask(case_id, lesion, "pipeline", f"auto_segment:{source}",
                   channel="lesion")
    _mark_stage(store, case_id, "auto_segmented")
    return StageOutcome(case_id, "auto_segmented", skipped=False, detail=source)


def stage_complete_slices(store: CaseStore, case_id: str,
                          config: PipelineConfig, annotations_path,
                          force: bool = False) -> StageOutcome:
    """Lift a sparse annotation volume (nonzero on >= 2 axial slices) to 3-D."""
    annotations = read_nifti(annotations_path)
    if not isinstance(annotations, LabelVolume):
        raise ValidationError(f"{annotations_path} is not a label volume")
    slices = [SliceAnnotation(int(z), annotations.labels[:, :, z] > 0)
              for z in range(annotations.meta.dims[2])
              if annotations.labels[:, :, z].any()]
    completed = complete_from_slices(slices, annotations.meta,
                                     profile=config.segmentation.completion_profile)
    store.set_mask(case_id, completed, "pipeline", "complete_from_slices",
                   channel="lesion")
    return StageOutcome(case_id, "auto_segmented", skipped=False,
                        detail=f"{len(slices)} annotated slices")


def stage_fuse(store: CaseStore, case_id: str, config: PipelineConfig,
               force: bool = False) -> StageOutcome:
    case_dir = store.case_dir(case_id)
    out = case_dir / FUSED_FILE
    if not force and out.exists():
        return StageOutcome(case_id, "final", skipped=True,
                            detail="fused volume up to date")
    anatomy = store.current_mask(case_id, "anatomy")
    lesion = store.current_mask(case_id, "lesion")
    xform_path = case_dir / TRANSFORM_FILE
    xform = RigidTransform.load(xform_path) if xform_path.exists() else None
    result = fuse_labels(anatomy, lesion, xform)
    write_nifti(result.fused, out)
    with open(case_dir / FUSION_STATS_FILE, "w", encoding="utf-8") as fh:
        json.dump({"lesion_voxels": result.lesion_voxels,
                   "lesion_outside_breast": result.lesion_outside_breast,
                   "containment_fraction": result.containment_fraction},
                  fh, indent=2)
        fh.write("\n")
    return StageOutcome(
        case_id, "fused", skipped=False,
        detail=f"containment {result.containment_fraction:.3f}")


def stage_mesh(store: CaseStore, case_id: str, config: PipelineConfig,
               format: str = "stl_per_label", smooth_iterations: int = 10,
               force: bool = False) -> StageOutcome:
    case_dir = store.case_dir(case_id)
    mesh_dir = case_dir / MESH_DIR
    done_marker = mesh_dir / ("scene.obj" if format == "obj_mtl"
                              else "whole_breast.stl")
    if not force and done_marker.exists():
        return StageOutcome(case_id, "final", skipped=True,
                            detail="meshes up to date")
    if not (case_dir / FUSED_FILE).exists():
        raise StateError(f"case {case_id}: run fuse first")
    fused = read_nifti(case_dir / FUSED_FILE)
    if not isinstance(fused, LabelVolume):
        raise ValidationError("fused.nii is not a label volume")
    meshes = []
    for label in sorted(fused.label_set() - {0}):
        mesh = marching_cubes(fused, label)
        if mesh.is_empty():
            continue
        if smooth_iterations > 0:
            mesh = smooth_taubin(mesh, iterations=smooth_iterations)
        meshes.append(mesh)
    if not meshes:
        raise StateError(f"case {case_id}: fused volume holds no structures")
    export_scene(meshes, mesh_dir, format=format, palette=config.palette)
    _mark_stage(store, case_id, "final")
    return StageOutcome(case_id, "final", skipped=False,
                        detail=f"{len(meshes)} meshes ({format})")


def evaluate_store(store: CaseStore, config: PipelineConfig,
                   case_ids=None) -> MetricReport:
    """Score fused predictions against manifest truth masks."""
    pairs = []
    for case_id in (case_ids or store.case_ids()):
        case_dir = store.case_dir(case_id)
        record = store.load_record(case_id)
        truth_rel = record.manifest.masks.get("truth_fused")
        fused_path = case_dir / FUSED_FILE
        if truth_rel is None or not fused_path.exists():
            continue
        pred = read_nifti(fused_path)
        truth = read_nifti(case_dir / truth_rel)
        pairs.append((pred, truth, case_id))
    if not pairs:
        raise ValidationError("no case has both a fused prediction and a "
                              "truth_fused mask")
    labels = sorted(set().union(*((p.label_set() | t.label_set())
                                  for p, t, _ in pairs)) - {0})
    report = evaluate_cohort(pairs, labels=labels, tau_mm=config.tau_mm)
    (store.root / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (store.root / "report.txt").write_text(report.to_text(), encoding="utf-8")
    return report


PIPELINE_STAGES = ("preprocess", "register", "segment", "fuse", "mesh")


def run_case_pipeline(store: CaseStore, case_id: str, config: PipelineConfig,
                      backend: str | None = None, mesh_format: str = "stl_per_label",
                      force: bool = False) -> list[StageOutcome]:
    """All stages for one case, stopping at the first failure."""
    outcomes = [
        stage_preprocess(store, case_id, config, force=force),
        stage_register(store, case_id, config, force=force),
        stage_segment(store, case_id, config, backend=backend, force=force),
        stage_fuse(store, case_id, config, force=force),
        stage_mesh(store, case_id, config, format=mesh_format, force=force),
    ]
    return outcomes
