"""Command-line pipeline orchestration: one subcommand per stage plus an
end-to-end runner and synthetic-case generation.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 processing
error. Failures emit one machine-parsable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import load_config
from .dicom import read_dicom_series
from .errors import (
    FormatError,
    GeometryError,
    MammoforgeError,
    StateError,
    ValidationError,
)
from .hitl import CaseStore
from .manifest import CaseManifest
from .nifti import read_nifti, write_nifti
from .phantom import DEFAULT_DIMS, DEFAULT_SPACING, generate_dataset
from .pipeline import (
    evaluate_store,
    run_case_pipeline,
    stage_complete_slices,
    stage_fuse,
    stage_mesh,
    stage_preprocess,
    stage_register,
    stage_segment,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_PROCESSING = 3

_VALIDATION_ERRORS = (ValidationError, StateError, FormatError, GeometryError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise _UsageError(message)


def _emit_error(category: str, exit_code: int, message: str) -> int:
    print(json.dumps({"error": category, "exit_code": exit_code,
                      "message": message}), file=sys.stderr)
    return exit_code


def _int3(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated values")
    return tuple(int(p) for p in parts)


def _float3(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated values")
    return tuple(float(p) for p in parts)


def build_parser() -> _Parser:
    # shared flags are accepted both before and after the subcommand;
    # SUPPRESS keeps subparser defaults from clobbering values given up front
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store", default=argparse.SUPPRESS,
                        help="case-store root directory (default: cwd)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="TOML config path (or $MAMMOFORGE_CONFIG)")
    common.add_argument("--force", action="store_true",
                        default=argparse.SUPPRESS,
                        help="recompute outputs that already exist")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                        help="parallel workers across cases")

    parser = _Parser(prog="mammoforge", parents=[common],
                     description="Breast-MRI segmentation and 3-D "
                                 "reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_parser("phantom", help="generate synthetic test cases")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, default=20240001)
    p.add_argument("--dims", type=_int3, default=DEFAULT_DIMS)
    p.add_argument("--spacing", type=_float3, default=DEFAULT_SPACING)

    p = add_parser("ingest", help="create a case from NIfTI files or "
                                      "DICOM directories")
    p.add_argument("--case-id", required=True)
    p.add_argument("--t1w", required=True)
    p.add_argument("--dce", required=True)
    p.add_argument("--notes", default="")

    for name in ("preprocess", "register", "fuse"):
        p = add_parser(name, help=f"run the {name} stage")
        p.add_argument("--case", default=None, help="case id (default: all)")

    p = add_parser("segment", help="produce anatomy + lesion masks")
    p.add_argument("--case", default=None)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--baseline", action="store_true")
    group.add_argument("--backend", default=None)
    p.add_argument("--seed-voxel", type=_int3, default=None,
                   help="lesion region-grow seed (default: brightest voxel)")

    p = add_parser("complete-slices",
                       help="lift sparse axial annotations to a 3-D lesion mask")
    p.add_argument("--case", required=True)
    p.add_argument("--annotations", required=True,
                   help="label volume, nonzero on the annotated slices")

    p = add_parser("export-revision", help="export image + mask for editing")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=("anatomy", "lesion"),
                   default="anatomy")

    p = add_parser("ingest-revision", help="ingest an edited mask "
                                               "(overwrites the stored one)")
    p.add_argument("--case", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--channel", choices=("anatomy", "lesion"),
                   default="anatomy")

    p = add_parser("split", help="deterministic train/test split")
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reassign", action="store_true")

    p = add_parser("evaluate", help="score fused masks against truth")
    p.add_argument("--tau", type=float, default=None)

    p = add_parser("mesh", help="extract and export surface meshes")
    p.add_argument("--case", default=None)
    p.add_argument("--format", choices=("stl_per_label", "obj_mtl"),
                   default="stl_per_label")
    p.add_argument("--smooth-iterations", type=int, default=10)

    p = add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--case", default=None)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--baseline", action="store_true")
    group.add_argument("--backend", default=None)
    p.add_argument("--mesh-format", choices=("stl_per_label", "obj_mtl"),
                   default="stl_per_label")

    return parser


def _select_cases(store: CaseStore, case: str | None) -> list[str]:
    if case is not None:
        if not (store.case_dir(case) / "manifest.json").exists():
            raise ValidationError(f"no case {case!r} in store {store.root}")
        return [case]
    case_ids = store.case_ids()
    if not case_ids:
        raise ValidationError(f"store {store.root} holds no cases")
    return case_ids


def _for_cases(store, args, fn):
    """Run fn(case_id) across selected cases, honoring --jobs."""
    case_ids = _select_cases(store, getattr(args, "case", None))
    if args.jobs > 1 and len(case_ids) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(fn, case_ids))
    else:
        outcomes = [fn(cid) for cid in case_ids]
    return outcomes


def _print_outcomes(outcomes) -> None:
    for outcome in outcomes:
        if isinstance(outcome, list):
            _print_outcomes(outcome)
            continue
        status = "skip" if outcome.skipped else "done"
        detail = f" ({outcome.detail})" if outcome.detail else ""
        print(f"[{status}] {outcome.case_id}: {outcome.stage}{detail}")


def _load_sequence(path_text: str):
    path = Path(path_text)
    if path.is_dir():
        return read_dicom_series(path)
    return read_nifti(path)


def _cmd_ingest(store: CaseStore, args) -> int:
    case_dir = store.case_dir(args.case_id)
    if case_dir.exists() and not args.force:
        raise ValidationError(f"case {args.case_id} already exists "
                              "(use --force to overwrite)")
    case_dir.mkdir(parents=True, exist_ok=True)
    for key, source in (("t1w", args.t1w), ("dce", args.dce)):
        write_nifti(_load_sequence(source), case_dir / f"{key}.nii")
    manifest = CaseManifest(case_id=args.case_id,
                            sequences={"t1w": "t1w.nii", "dce": "dce.nii"},
                            notes=args.notes)
    manifest.save(case_dir / "manifest.json")
    store.save_record(args.case_id, store.load_record(args.case_id))
    print(f"[done] {args.case_id}: ingested")
    return EXIT_OK


def _dispatch(args, config, store: CaseStore) -> int:
    if args.command == "phantom":
        paths = generate_dataset(store.root, args.cases, seed=args.seed,
                                 dims=args.dims, spacing=args.spacing)
        for path in paths:
            print(f"[done] {path.name}: phantom written")
        return EXIT_OK

    if args.command == "ingest":
        return _cmd_ingest(store, args)

    if args.command == "preprocess":
        _print_outcomes(_for_cases(store, args, lambda cid: stage_preprocess(
            store, cid, config, force=args.force)))
        return EXIT_OK

    if args.command == "register":
        _print_outcomes(_for_cases(store, args, lambda cid: stage_register(
            store, cid, config, force=args.force)))
        return EXIT_OK

    if args.command == "segment":
        backend = None if args.baseline else args.backend
        _print_outcomes(_for_cases(store, args, lambda cid: stage_segment(
            store, cid, config, backend=backend, seed_voxel=args.seed_voxel,
            force=args.force)))
        return EXIT_OK

    if args.command == "complete-slices":
        outcome = stage_complete_slices(store, args.case, config,
                                        args.annotations, force=args.force)
        _print_outcomes([outcome])
        return EXIT_OK

    if args.command == "export-revision":
        img, mask = store.export_for_revision(args.case, args.out,
                                              channel=args.channel)
        print(f"[done] {args.case}: exported {img.name}, {mask.name}")
        return EXIT_OK

    if args.command == "ingest-revision":
        stats = store.ingest_revision(args.case, args.mask,
                                      channel=args.channel,
                                      archive=config.archive_revisions)
        print(f"[done] {args.case}: revision ingested "
              f"(+{stats.voxels_added}/-{stats.voxels_removed} voxels, "
              f"dice {stats.dice_before_after:.4f})")
        return EXIT_OK

    if args.command == "split":
        fraction = (args.fraction if args.fraction is not None
                    else config.split.fraction)
        seed = args.seed if args.seed is not None else config.split.seed
        assignment = store.split_dataset(fraction, seed,
                                         reassign=args.reassign)
        print(f"[done] split: {len(assignment.train)} train / "
              f"{len(assignment.test)} test (seed {seed})")
        return EXIT_OK

    if args.command == "evaluate":
        if args.tau is not None:
            from dataclasses import replace
            config = replace(config, tau_mm=args.tau)
        report = evaluate_store(store, config)
        print(report.to_text(), end="")
        print(f"[done] report written to {store.root / 'report.csv'}")
        return EXIT_OK

    if args.command == "fuse":
        _print_outcomes(_for_cases(store, args, lambda cid: stage_fuse(
            store, cid, config, force=args.force)))
        return EXIT_OK

    if args.command == "mesh":
        _print_outcomes(_for_cases(store, args, lambda cid: stage_mesh(
            store, cid, config, format=args.format,
            smooth_iterations=args.smooth_iterations, force=args.force)))
        return EXIT_OK

    if args.command == "pipeline":
        backend = None if args.baseline else args.backend
        _print_outcomes(_for_cases(store, args, lambda cid: run_case_pipeline(
            store, cid, config, backend=backend,
            mesh_format=args.mesh_format, force=args.force)))
        try:
            report = evaluate_store(store, config)
            print(report.to_text(), end="")
        except ValidationError:
            print("[note] no ground-truth masks in store; evaluation skipped")
        return EXIT_OK

    raise _UsageError(f"unknown subcommand {args.command!r}")


_SHARED_DEFAULTS = {"store": ".", "config": None, "force": False, "jobs": 1}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for key, value in _SHARED_DEFAULTS.items():
            if not hasattr(args, key):
                setattr(args, key, value)
        if args.command is None:
            raise _UsageError("a subcommand is required (see --help)")
        config = load_config(args.config)
        store = CaseStore(args.store)
        return _dispatch(args, config, store)
    except _UsageError as exc:
        return _emit_error("usage", EXIT_USAGE, str(exc))
    except _VALIDATION_ERRORS as exc:
        return _emit_error("validation", EXIT_VALIDATION, str(exc))
    except MammoforgeError as exc:
        return _emit_error("processing", EXIT_PROCESSING, str(exc))
    except OSError as exc:
        return _emit_error("processing", EXIT_PROCESSING, str(exc))


if __name__ == "__main__":
    sys.exit(main())
