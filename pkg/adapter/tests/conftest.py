"""Adapter test helpers: a self-contained scalar NIfTI writer for fixtures."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest


def write_scalar_nifti(path, voxels: np.ndarray,
                       spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Minimal float32 single-file NIfTI-1 writer (little endian, sform)."""
    voxels = np.asarray(voxels, dtype="<f4")
    nx, ny, nz = voxels.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)          # float32
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    struct.pack_into("<hh", hdr, 252, 0, 1)           # sform only
    struct.pack_into("<4f", hdr, 280, spacing[0], 0, 0, origin[0])
    struct.pack_into("<4f", hdr, 296, 0, spacing[1], 0, origin[1])
    struct.pack_into("<4f", hdr, 312, 0, 0, spacing[2], origin[2])
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00" * 4)
        fh.write(voxels.tobytes(order="F"))


def make_workdir(tmp_path: Path, voxels: np.ndarray, request: dict,
                 spacing=(1.0, 1.0, 1.0)) -> Path:
    workdir = tmp_path / "exchange"
    workdir.mkdir(parents=True)
    write_scalar_nifti(workdir / "input.nii", voxels, spacing=spacing)
    with open(workdir / "request.json", "w", encoding="utf-8") as fh:
        json.dump(request, fh)
    return workdir


def base_request(model_id: str, labels=(1,)) -> dict:
    return {
        "protocol_version": 1,
        "model_id": model_id,
        "labels_requested": list(labels),
        "case_id": "testcase",
    }


@pytest.fixture
def rng():
    return np.random.default_rng(42)
