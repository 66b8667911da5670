"""Bit-exact NIfTI-1 single-file (.nii / .nii.gz) serialization.

Deliberately a subset: little-endian, single-file ``n+1`` magic, datatypes
uint8 / int16 / uint16 / float32. Scalar volumes are written as float32,
label volumes as uint8 with the label intent code so readers can tell them
apart. Writes are byte-deterministic (fixed header fields, gzip mtime 0).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .volume import GridMeta, ImageVolume, LabelVolume

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
DT_UINT16 = 512
_DTYPES = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
    DT_UINT16: np.dtype("<u2"),
}
_INTEGER_CODES = {DT_UINT8, DT_INT16, DT_UINT16}

INTENT_LABEL = 1002
UNITS_MM = 2

# offsets of the header fields we validate, for error messages
_OFF_SIZEOF_HDR = 0
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_MAGIC = 344

_HDR_STRUCT = struct.Struct(
    "<i"      # sizeof_hdr
    "10s18s"  # data_type, db_name
    "ihcc"    # extents, session_error, regular, dim_info
    "8h"      # dim
    "3f"      # intent_p1..p3
    "hhh"     # intent_code, datatype, bitpix
    "h"       # slice_start
    "8f"      # pixdim
    "fff"     # vox_offset, scl_slope, scl_inter
    "hcc"     # slice_end, slice_code, xyzt_units
    "ffff"    # cal_max, cal_min, slice_duration, toffset
    "ii"      # glmax, glmin
    "80s24s"  # descrip, aux_file
    "hh"      # qform_code, sform_code
    "6f"      # quatern_b..d, qoffset_x..z
    "4f4f4f"  # srow_x, srow_y, srow_z
    "16s"     # intent_name
    "4s"      # magic
)
assert _HDR_STRUCT.size == HEADER_SIZE


def _is_gzip(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(2) == b"\x1f\x8b"


def _read_bytes(path: Path) -> bytes:
    if _is_gzip(path):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _quaternion_direction(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a_sq, 0.0))
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    if qfac < 0:
        r[:, 2] = -r[:, 2]
    return r


def read_nifti(path) -> ImageVolume | LabelVolume:
    """Load a NIfTI-1 volume; integer files carrying the label intent load as labels."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)",
                          offset=len(raw))
    fields = _HDR_STRUCT.unpack_from(raw, 0)
    sizeof_hdr = fields[0]
    if sizeof_hdr != HEADER_SIZE:
        raise FormatError(
            f"bad sizeof_hdr {sizeof_hdr}, expected {HEADER_SIZE} "
            "(big-endian files are not supported)", offset=_OFF_SIZEOF_HDR)
    magic = fields[-1]
    if magic == MAGIC_PAIR:
        raise FormatError("two-file (.hdr/.img) NIfTI is not supported",
                          offset=_OFF_MAGIC)
    if magic != MAGIC_SINGLE:
        raise FormatError(f"bad magic {magic!r}", offset=_OFF_MAGIC)

    dim = fields[7:15]
    if dim[0] != 3:
        raise FormatError(f"expected a 3-D volume, got dim[0]={dim[0]}",
                          offset=_OFF_DIM)
    dims = (dim[1], dim[2], dim[3])
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dimensions {dims}", offset=_OFF_DIM)

    intent_code = fields[18]
    datatype = fields[19]
    if datatype not in _DTYPES:
        raise FormatError(f"unsupported datatype code {datatype}",
                          offset=_OFF_DATATYPE)
    dtype = _DTYPES[datatype]

    pixdim = fields[22:30]
    vox_offset = int(fields[30])
    scl_slope, scl_inter = fields[31], fields[32]
    qform_code, sform_code = fields[44], fields[45]
    quat = fields[46:52]
    srow = np.array(fields[52:64], dtype=np.float64).reshape(3, 4)

    if sform_code > 0:
        affine = srow[:, :3]
        spacing = np.linalg.norm(affine, axis=0)
        if np.any(spacing <= 0):
            raise FormatError("sform encodes non-positive spacing", offset=280)
        direction = affine / spacing
        origin = srow[:, 3]
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        direction = _quaternion_direction(quat[0], quat[1], quat[2], qfac)
        spacing = np.abs(np.array(pixdim[1:4], dtype=np.float64))
        origin = np.array(quat[3:6], dtype=np.float64)
    else:
        direction = np.eye(3)
        spacing = np.abs(np.array(pixdim[1:4], dtype=np.float64))
        spacing[spacing == 0] = 1.0
        origin = np.zeros(3)

    # re-orthonormalize float32 header rounding before the strict meta check
    u, _, vt = np.linalg.svd(direction)
    direction = u @ vt
    meta = GridMeta(dims, spacing, origin, direction)

    count = dims[0] * dims[1] * dims[2]
    nbytes = count * dtype.itemsize
    data = raw[vox_offset:vox_offset + nbytes]
    if len(data) < nbytes:
        raise FormatError(
            f"truncated data section: expected {nbytes} bytes, found {len(data)}",
            offset=vox_offset + len(data))
    arr = np.frombuffer(data, dtype=dtype).reshape(dims, order="F")

    if datatype in _INTEGER_CODES and intent_code == INTENT_LABEL:
        return LabelVolume(meta, arr.astype(np.uint8))

    values = arr.astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        values = (values.astype(np.float64) * slope + scl_inter).astype(np.float32)
    return ImageVolume(meta, values)


def write_nifti(volume: ImageVolume | LabelVolume, path) -> None:
    """Write a volume as single-file NIfTI-1 (gzipped when the path ends in .gz)."""
    path = Path(path)
    if isinstance(volume, LabelVolume):
        data = volume.labels.astype("<u1")
        datatype, bitpix, intent = DT_UINT8, 8, INTENT_LABEL
    elif isinstance(volume, ImageVolume):
        data = volume.voxels.astype("<f4")
        datatype, bitpix, intent = DT_FLOAT32, 32, 0
    else:
        raise TypeError(f"cannot serialize {type(volume).__name__}")

    meta = volume.meta
    affine = meta.direction * meta.spacing  # column k scaled by spacing[k]
    srow = np.hstack([affine, meta.origin.reshape(3, 1)]).astype(np.float32)

    header = _HDR_STRUCT.pack(
        HEADER_SIZE,
        b"", b"",
        0, 0, b"r", b"\x00",
        3, meta.dims[0], meta.dims[1], meta.dims[2], 1, 1, 1, 1,
        0.0, 0.0, 0.0,
        intent, datatype, bitpix,
        0,
        1.0, float(meta.spacing[0]), float(meta.spacing[1]),
        float(meta.spacing[2]), 0.0, 0.0, 0.0, 0.0,
        float(VOX_OFFSET), 1.0, 0.0,
        0, b"\x00", bytes([UNITS_MM]),
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"mammoforge", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *srow[0], *srow[1], *srow[2],
        b"",
        MAGIC_SINGLE,
    )
    payload = header + b"\x00\x00\x00\x00" + data.tobytes(order="F")

    if path.suffix == ".gz":
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)
