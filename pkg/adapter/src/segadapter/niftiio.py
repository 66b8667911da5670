"""Minimal standalone NIfTI-1 I/O for the adapter.

Deliberately not shared with any pipeline implementation: the adapter reads
the little-endian single-file subset of NIfTI-1 it needs and writes its
output by patching the *input's own header bytes* (datatype, bitpix,
intent, scaling), so every geometry field of the reply is byte-compatible
with the request by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"
INTENT_LABEL = 1002

_OFF_DIM = 40
_OFF_INTENT_CODE = 68
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_SCL_INTER = 116
_OFF_MAGIC = 344

_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    512: np.dtype("<u2"),
}


class NiftiError(Exception):
    pass


@dataclass
class NiftiVolume:
    """One loaded volume plus the raw header bytes it arrived with."""

    voxels: np.ndarray            # (nx, ny, nz), x-fastest on disk
    spacing: tuple[float, float, float]
    header: bytes                 # original 348 header bytes

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def read_nifti(path) -> NiftiVolume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: too short for a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"{path}: bad sizeof_hdr {sizeof_hdr}")
    if raw[_OFF_MAGIC:_OFF_MAGIC + 4] != MAGIC:
        raise NiftiError(f"{path}: unsupported magic")
    dim = struct.unpack_from("<8h", raw, _OFF_DIM)
    if dim[0] != 3:
        raise NiftiError(f"{path}: expected 3-D volume, dim[0]={dim[0]}")
    dims = (dim[1], dim[2], dim[3])
    datatype = struct.unpack_from("<h", raw, _OFF_DATATYPE)[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype]
    pixdim = struct.unpack_from("<8f", raw, _OFF_PIXDIM)
    vox_offset = int(struct.unpack_from("<f", raw, _OFF_VOX_OFFSET)[0])
    slope, inter = struct.unpack_from("<ff", raw, _OFF_SCL_SLOPE)

    count = dims[0] * dims[1] * dims[2]
    data = raw[vox_offset:vox_offset + count * dtype.itemsize]
    if len(data) < count * dtype.itemsize:
        raise NiftiError(f"{path}: truncated data section")
    voxels = np.frombuffer(data, dtype=dtype).reshape(dims, order="F")
    if dtype.kind == "f" or slope not in (0.0, 1.0) or inter != 0.0:
        scale = slope if slope != 0.0 else 1.0
        voxels = voxels.astype(np.float64) * scale + inter
    return NiftiVolume(voxels=np.asarray(voxels),
                       spacing=(abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0,
                                abs(pixdim[3]) or 1.0),
                       header=raw[:HEADER_SIZE])


def write_labels_like(source: NiftiVolume, labels: np.ndarray, path) -> None:
    """Write a uint8 label volume reusing the source volume's header bytes.

    Only datatype/bitpix/intent/scaling/vox_offset are patched; dims,
    pixdim, and the quaternion/sform fields pass through untouched, which
    is exactly the geometry-echo the protocol demands.
    """
    labels = np.ascontiguousarray(labels)
    if labels.shape != source.dims:
        raise NiftiError(f"label shape {labels.shape} does not match input "
                         f"dims {source.dims}")
    header = bytearray(source.header)
    struct.pack_into("<h", header, _OFF_INTENT_CODE, INTENT_LABEL)
    struct.pack_into("<hh", header, _OFF_DATATYPE, 2, 8)  # uint8
    struct.pack_into("<f", header, _OFF_VOX_OFFSET, 352.0)
    struct.pack_into("<ff", header, _OFF_SCL_SLOPE, 1.0, 0.0)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(labels.astype("<u1").tobytes(order="F"))
