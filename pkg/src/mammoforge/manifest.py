"""Per-case JSON manifests; a dataset is a directory of these.

Paths inside a manifest are stored relative to the manifest file so case
directories can be moved or diffed wholesale. No patient-identifying tags
are ever stored here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

SEQUENCE_KEYS = ("t1w", "dce")


@dataclass
class CaseManifest:
    case_id: str
    sequences: dict[str, str] = field(default_factory=dict)
    masks: dict[str, str] = field(default_factory=dict)
    notes: str = ""

    def __post_init__(self):
        if not self.case_id:
            raise ValidationError("case_id must be non-empty")
        unknown = set(self.sequences) - set(SEQUENCE_KEYS)
        if unknown:
            raise ValidationError(
                f"unknown sequence keys {sorted(unknown)}; expected {SEQUENCE_KEYS}")

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "sequences": dict(self.sequences),
            "masks": dict(self.masks),
            "notes": self.notes,
        }

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path, check_files: bool = True) -> "CaseManifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        missing = {"case_id", "sequences", "masks", "notes"} - set(data)
        if missing:
            raise ValidationError(f"manifest missing fields {sorted(missing)}")
        manifest = CaseManifest(case_id=data["case_id"],
                                sequences=dict(data["sequences"]),
                                masks=dict(data["masks"]),
                                notes=data["notes"])
        if check_files:
            base = path.parent
            for kind, rel in list(manifest.sequences.items()) + list(manifest.masks.items()):
                target = base / rel
                if not target.exists():
                    raise ValidationError(
                        f"manifest {manifest.case_id}: referenced file for "
                        f"{kind!r} does not exist: {target}")
        return manifest


def load_dataset(root, check_files: bool = True) -> list[CaseManifest]:
    """Load every case manifest under ``root`` (one subdirectory per case)."""
    root = Path(root)
    manifests = []
    for mpath in sorted(root.glob("*/manifest.json")):
        manifests.append(CaseManifest.load(mpath, check_files=check_files))
    ids = [m.case_id for m in manifests]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise ValidationError(f"duplicate case ids in dataset: {sorted(dupes)}")
    return manifests
