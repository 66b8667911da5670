"""Shell-script stub backends for exercising the exchange protocol."""

from __future__ import annotations

import os
import stat
import sys
import textwrap
from pathlib import Path

_PY_PREAMBLE = """\
import json, sys
from pathlib import Path
sys.path.insert(0, {src!r})
import numpy as np
from mammoforge.nifti import read_nifti, write_nifti
from mammoforge.volume import LabelVolume, GridMeta

workdir = Path(sys.argv[sys.argv.index("--workdir") + 1])
request = json.loads((workdir / "request.json").read_text())
volume = read_nifti(workdir / "input.nii")
"""

_SRC_DIR = str(Path(__file__).resolve().parent.parent / "src")


def make_stub(directory: Path, name: str, body: str) -> Path:
    """Write an executable sh wrapper around an inline python program."""
    py = directory / f"{name}.py"
    py.write_text(_PY_PREAMBLE.format(src=_SRC_DIR) + textwrap.dedent(body))
    sh = directory / name
    sh.write_text(f"#!/bin/sh\nexec {sys.executable} {py} \"$@\"\n")
    sh.chmod(sh.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return sh


def threshold_stub(directory: Path, threshold: float = 0.5) -> Path:
    return make_stub(directory, "stub_threshold", f"""\
        label = request["labels_requested"][0]
        mask = (volume.voxels >= {threshold}).astype(np.uint8) * label
        write_nifti(LabelVolume(volume.meta, mask), workdir / "output.nii")
        (workdir / "response.json").write_text(json.dumps({{
            "protocol_version": 1, "status": "ok", "message": "",
            "labels_emitted": [label]}}))
        sys.exit(0)
        """)


def wrong_dims_stub(directory: Path) -> Path:
    return make_stub(directory, "stub_wrongdims", """\
        label = request["labels_requested"][0]
        dims = (2, 2, 2)
        bad = LabelVolume(GridMeta(dims), np.full(dims, label, dtype=np.uint8))
        write_nifti(bad, workdir / "output.nii")
        (workdir / "response.json").write_text(json.dumps({
            "protocol_version": 1, "status": "ok", "message": "",
            "labels_emitted": [label]}))
        sys.exit(0)
        """)


def sleepy_stub(directory: Path, seconds: float = 30.0) -> Path:
    return make_stub(directory, "stub_sleepy", f"""\
        import time
        time.sleep({seconds})
        sys.exit(0)
        """)


def error_status_stub(directory: Path) -> Path:
    return make_stub(directory, "stub_error", """\
        (workdir / "response.json").write_text(json.dumps({
            "protocol_version": 1, "status": "error",
            "message": "synthetic failure", "labels_emitted": []}))
        sys.exit(1)
        """)


def wrong_label_stub(directory: Path) -> Path:
    return make_stub(directory, "stub_wronglabel", """\
        mask = np.zeros(volume.meta.dims, dtype=np.uint8)
        mask[0, 0, 0] = 3
        write_nifti(LabelVolume(volume.meta, mask), workdir / "output.nii")
        (workdir / "response.json").write_text(json.dumps({
            "protocol_version": 1, "status": "ok", "message": "",
            "labels_emitted": [3]}))
        sys.exit(0)
        """)
