"""Human-in-the-loop round-trip: export masks for external editing, ingest
revisions with overwrite semantics, tamper-evident provenance, edit
accounting, and deterministic train/test splits.

Store layout is one directory per case:

    <root>/<case_id>/manifest.json          case manifest
    <root>/<case_id>/record.json            stage + split assignment
    <root>/<case_id>/<channel>_mask.nii     current working mask per channel
    <root>/<case_id>/provenance_<channel>.jsonl
    <root>/<case_id>/archive/               prior masks (optional)

Revision policy is overwrite, not merge: a human edit replaces the stored
mask, and prior versions survive only as hashes in the provenance chain
(plus optional archived copies).
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import StateError, ValidationError
from .manifest import CaseManifest
from .nifti import read_nifti, write_nifti
from .volume import LabelVolume

STAGES = ("ingested", "preprocessed", "registered", "auto_segmented",
          "revised", "final")
SPLITS = ("unassigned", "train", "test")
CHANNELS = ("anatomy", "lesion")


def stage_index(stage: str) -> int:
    try:
        return STAGES.index(stage)
    except ValueError:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")


@dataclass(frozen=True)
class ProvenanceEvent:
    timestamp: str                 # ISO-8601 UTC
    actor: str                     # "pipeline" | "human"
    action: str
    mask_hash_before: str | None
    mask_hash_after: str | None

    def __post_init__(self):
        if self.actor not in ("pipeline", "human"):
            raise ValidationError(f"actor must be pipeline or human, got "
                                  f"{self.actor!r}")

    def to_json(self) -> str:
        return json.dumps({
            "timestamp": self.timestamp,
            "actor": self.actor,
            "action": self.action,
            "mask_hash_before": self.mask_hash_before,
            "mask_hash_after": self.mask_hash_after,
        })

    @staticmethod
    def from_json(line: str) -> "ProvenanceEvent":
        data = json.loads(line)
        return ProvenanceEvent(
            timestamp=data["timestamp"], actor=data["actor"],
            action=data["action"],
            mask_hash_before=data["mask_hash_before"],
            mask_hash_after=data["mask_hash_after"])


@dataclass
class EditStats:
    voxels_added: int
    voxels_removed: int
    per_label: dict[int, dict[str, int]]
    dice_before_after: float


@dataclass
class CaseRecord:
    manifest: CaseManifest
    stage: str = "ingested"
    split: str = "unassigned"

    def __post_init__(self):
        stage_index(self.stage)
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class SplitAssignment:
    seed: int
    train: tuple[str, ...]
    test: tuple[str, ...]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"seed": self.seed, "train": list(self.train),
                       "test": list(self.test)}, fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path) -> "SplitAssignment":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return SplitAssignment(seed=int(data["seed"]),
                               train=tuple(data["train"]),
                               test=tuple(data["test"]))


def mask_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now_utc() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def compute_edit_stats(before: LabelVolume | None,
                       after: LabelVolume) -> EditStats:
    """Set-difference accounting between consecutive mask versions."""
    new = after.labels
    old = (before.labels if before is not None
           else np.zeros_like(new))
    fg_old = old > 0
    fg_new = new > 0
    added = int(np.count_nonzero(~fg_old & fg_new))
    removed = int(np.count_nonzero(fg_old & ~fg_new))
    per_label: dict[int, dict[str, int]] = {}
    for label in sorted(set(np.unique(old)) | set(np.unique(new))):
        if label == 0:
            continue
        label = int(label)
        per_label[label] = {
            "added": int(np.count_nonzero((old != label) & (new == label))),
            "removed": int(np.count_nonzero((old == label) & (new != label))),
        }
    total = int(fg_old.sum()) + int(fg_new.sum())
    if total == 0:
        dice = 1.0
    else:
        dice = 2.0 * int(np.count_nonzero(fg_old & fg_new)) / total
    return EditStats(voxels_added=added, voxels_removed=removed,
                     per_label=per_label, dice_before_after=dice)


class CaseStore:
    """Directory-backed store of case records, masks, and provenance."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, case_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(case_id, threading.Lock())

    # paths ------------------------------------------------------------
    def case_dir(self, case_id: str) -> Path:
        return self.root / case_id

    def mask_path(self, case_id: str, channel: str = "anatomy") -> Path:
        self._check_channel(channel)
        return self.case_dir(case_id) / f"{channel}_mask.nii"

    def provenance_path(self, case_id: str, channel: str = "anatomy") -> Path:
        self._check_channel(channel)
        return self.case_dir(case_id) / f"provenance_{channel}.jsonl"

    @staticmethod
    def _check_channel(channel: str) -> None:
        if channel not in CHANNELS:
            raise ValidationError(f"unknown mask channel {channel!r}; "
                                  f"expected one of {CHANNELS}")

    # records ------------------------------------------------------------
    def case_ids(self) -> list[str]:
        return sorted(p.parent.name for p in self.root.glob("*/manifest.json"))

    def load_record(self, case_id: str) -> CaseRecord:
        case_dir = self.case_dir(case_id)
        manifest = CaseManifest.load(case_dir / "manifest.json")
        record_path = case_dir / "record.json"
        stage, split = "ingested", "unassigned"
        if record_path.exists():
            with open(record_path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
            stage, split = data.get("stage", stage), data.get("split", split)
        return CaseRecord(manifest=manifest, stage=stage, split=split)

    def save_record(self, case_id: str, record: CaseRecord) -> None:
        with open(self.case_dir(case_id) / "record.json", "w",
                  encoding="utf-8") as fh:
            json.dump({"stage": record.stage, "split": record.split}, fh,
                      indent=2)
            fh.write("\n")

    def advance_stage(self, case_id: str, stage: str) -> CaseRecord:
        """Move a case forward; backward transitions are rejected."""
        record = self.load_record(case_id)
        if stage_index(stage) < stage_index(record.stage):
            raise StateError(
                f"case {case_id}: cannot move backward from "
                f"{record.stage!r} to {stage!r}")
        record.stage = stage
        self.save_record(case_id, record)
        return record

    # provenance ------------------------------------------------------------
    def provenance(self, case_id: str, channel: str = "anatomy") -> list[ProvenanceEvent]:
        path = self.provenance_path(case_id, channel)
        if not path.exists():
            return []
        with open(path, "r", encoding="utf-8") as fh:
            return [ProvenanceEvent.from_json(line)
                    for line in fh if line.strip()]

    def _append_event(self, case_id: str, channel: str,
                      event: ProvenanceEvent) -> None:
        with open(self.provenance_path(case_id, channel), "a",
                  encoding="utf-8") as fh:
            fh.write(event.to_json() + "\n")

    def validate_provenance(self, case_id: str, channel: str = "anatomy") -> bool:
        """True when the hash chain links up and ends at the stored mask."""
        events = self.provenance(case_id, channel)
        if not events:
            return not self.mask_path(case_id, channel).exists()
        if events[0].mask_hash_before is not None:
            return False
        for prev, cur in zip(events[:-1], events[1:]):
            if cur.mask_hash_before != prev.mask_hash_after:
                return False
        mask_file = self.mask_path(case_id, channel)
        if not mask_file.exists():
            return False
        return events[-1].mask_hash_after == mask_hash(mask_file)

    # masks ------------------------------------------------------------
    def current_mask(self, case_id: str, channel: str = "anatomy") -> LabelVolume:
        path = self.mask_path(case_id, channel)
        if not path.exists():
            raise StateError(f"case {case_id} has no {channel} mask yet")
        volume = read_nifti(path)
        if not isinstance(volume, LabelVolume):
            raise ValidationError(f"{path} does not hold a label volume")
        return volume

    def set_mask(self, case_id: str, mask: LabelVolume, actor: str,
                 action: str, channel: str = "anatomy") -> None:
        """Install a pipeline-produced mask and chain a provenance event."""
        with self._lock(case_id):
            path = self.mask_path(case_id, channel)
            before = mask_hash(path) if path.exists() else None
            tmp = path.with_suffix(".tmp.nii")
            write_nifti(mask, tmp)
            os.replace(tmp, path)
            self._append_event(case_id, channel, ProvenanceEvent(
                timestamp=_now_utc(), actor=actor, action=action,
                mask_hash_before=before, mask_hash_after=mask_hash(path)))

    # HITL operations -----------------------------------------------------
    def export_for_revision(self, case_id: str, out_dir,
                            channel: str = "anatomy") -> tuple[Path, Path]:
        """Write ``<case_id>_img.nii`` + ``<case_id>_mask.nii`` for editing."""
        record = self.load_record(case_id)
        mask_file = self.mask_path(case_id, channel)
        if not mask_file.exists():
            raise StateError(f"case {case_id} has no {channel} mask to export")
        sequence_key = "t1w" if channel == "anatomy" else "dce"
        rel = record.manifest.sequences.get(sequence_key)
        if rel is None:
            raise StateError(f"case {case_id} has no {sequence_key} sequence")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        img_out = out_dir / f"{case_id}_img.nii"
        mask_out = out_dir / f"{case_id}_mask.nii"
        shutil.copyfile(self.case_dir(case_id) / rel, img_out)
        shutil.copyfile(mask_file, mask_out)
        digest = mask_hash(mask_file)
        self._append_event(case_id, channel, ProvenanceEvent(
            timestamp=_now_utc(), actor="pipeline",
            action=f"export_for_revision:{channel}",
            mask_hash_before=digest, mask_hash_after=digest))
        return img_out, mask_out

    def ingest_revision(self, case_id: str, revised_mask_path,
                        channel: str = "anatomy",
                        archive: bool = False) -> EditStats:
        """Overwrite the stored mask with a human revision, atomically.

        All validation happens before any mutation: on error the stored
        mask, provenance, and record are untouched.
        """
        with self._lock(case_id):
            current = self.current_mask(case_id, channel)
            revised = read_nifti(revised_mask_path)
            if not isinstance(revised, LabelVolume):
                raise ValidationError(
                    f"revision {revised_mask_path} is not a label volume")
            if not revised.meta.same_grid(current.meta, tol=1e-4):
                raise ValidationError(
                    f"revision geometry {revised.meta.dims} does not match "
                    f"case grid {current.meta.dims}")
            stats = compute_edit_stats(current, revised)

            path = self.mask_path(case_id, channel)
            before = mask_hash(path)
            if archive:
                archive_dir = self.case_dir(case_id) / "archive"
                archive_dir.mkdir(exist_ok=True)
                n = len(list(archive_dir.glob(f"{channel}_*.nii")))
                shutil.copyfile(path, archive_dir / f"{channel}_{n:03d}.nii")
            tmp = path.with_suffix(".tmp.nii")
            write_nifti(revised, tmp)
            os.replace(tmp, path)
            self._append_event(case_id, channel, ProvenanceEvent(
                timestamp=_now_utc(), actor="human",
                action=f"ingest_revision:{channel}",
                mask_hash_before=before, mask_hash_after=mask_hash(path)))
            # stage becomes at least "revised"; never moves backward
            if stage_index(self.load_record(case_id).stage) < stage_index("revised"):
                self.advance_stage(case_id, "revised")
            return stats

    # splits ------------------------------------------------------------
    def split_dataset(self, train_fraction: float, seed: int,
                      reassign: bool = False) -> SplitAssignment:
        """Deterministic case-level split; rounding is half-up on N*fraction."""
        if not 0 < train_fraction < 1:
            raise ValidationError("train_fraction must be in (0, 1)")
        case_ids = self.case_ids()
        if not case_ids:
            raise ValidationError("store holds no cases to split")
        records = {cid: self.load_record(cid) for cid in case_ids}
        for cid, record in records.items():
            if stage_index(record.stage) < stage_index("revised"):
                raise ValidationError(
                    f"case {cid} is at stage {record.stage!r}; all cases must "
                    "be revised before splitting")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(case_ids))
        n_train = int(np.floor(len(case_ids) * train_fraction + 0.5))
        train = tuple(sorted(case_ids[i] for i in order[:n_train]))
        test = tuple(sorted(case_ids[i] for i in order[n_train:]))
        assigned = {cid for cid, r in records.items() if r.split != "unassigned"}
        if assigned and not reassign:
            # re-running with identical parameters is an idempotent no-op;
            # anything that would change an assignment needs the flag
            current = {cid: records[cid].split for cid in case_ids}
            wanted = {cid: ("train" if cid in set(train) else "test")
                      for cid in case_ids}
            if current != wanted:
                raise ValidationError(
                    "cases already carry a different split assignment; "
                    "pass reassign to redo the split")
        for cid in case_ids:
            record = records[cid]
            record.split = "train" if cid in set(train) else "test"
            self.save_record(cid, record)
        assignment = SplitAssignment(seed=seed, train=train, test=test)
        assignment.save(self.root / "split.json")
        return assignment
