"""Minimal DICOM series ingestion.

Supports exactly what the pipeline needs: Part-10 files, explicit VR little
endian, single-frame uncompressed MR slices of one series. Everything else
is rejected with a specific error so users route through external
conversion. Only geometric tags and pixel data are kept; all other tags
are read past and discarded.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError
from .volume import GridMeta, ImageVolume

EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"

# explicit-VR encodings with a 2-byte reserved field and 4-byte length
_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}

TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
TAG_SERIES_UID = (0x0020, 0x000E)
TAG_IMAGE_POSITION = (0x0020, 0x0032)
TAG_IMAGE_ORIENTATION = (0x0020, 0x0037)
TAG_PIXEL_SPACING = (0x0028, 0x0030)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
TAG_RESCALE_SLOPE = (0x0028, 0x1053)
TAG_NUMBER_OF_FRAMES = (0x0028, 0x0008)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)

_WANTED = {
    TAG_TRANSFER_SYNTAX, TAG_SERIES_UID, TAG_IMAGE_POSITION,
    TAG_IMAGE_ORIENTATION, TAG_PIXEL_SPACING, TAG_ROWS, TAG_COLS,
    TAG_BITS_ALLOCATED, TAG_PIXEL_REPRESENTATION, TAG_RESCALE_INTERCEPT,
    TAG_RESCALE_SLOPE, TAG_NUMBER_OF_FRAMES, TAG_PIXEL_DATA,
}


def _parse_elements(buf: bytes, start: int, path: Path) -> dict:
    """Walk explicit-VR-LE elements, keeping only the tags we care about."""
    out: dict = {}
    pos = start
    n = len(buf)
    while pos + 8 <= n:
        group = int.from_bytes(buf[pos:pos + 2], "little")
        element = int.from_bytes(buf[pos + 2:pos + 4], "little")
        vr = buf[pos + 4:pos + 6]
        if vr in _LONG_VRS:
            length = int.from_bytes(buf[pos + 8:pos + 12], "little")
            value_at = pos + 12
        else:
            length = int.from_bytes(buf[pos + 6:pos + 8], "little")
            value_at = pos + 8
        if length == 0xFFFFFFFF or vr == b"SQ":
            raise FormatError(
                f"{path.name}: undefined-length or sequence element "
                f"({group:04X},{element:04X}) is not supported", offset=pos)
        value = buf[value_at:value_at + length]
        if len(value) < length:
            raise FormatError(f"{path.name}: truncated element "
                              f"({group:04X},{element:04X})", offset=value_at)
        if (group, element) in _WANTED:
            out[(group, element)] = (vr, value)
        pos = value_at + length
    return out


def _decimal_list(value: bytes) -> list[float]:
    return [float(v) for v in value.decode("ascii").strip("\x00 ").split("\\")]


def _ushort(value: bytes) -> int:
    return int.from_bytes(value[:2], "little")


@dataclass
class _Slice:
    position: np.ndarray
    orientation: np.ndarray  # 6 values
    pixel_spacing: np.ndarray  # (row spacing, column spacing)
    rows: int
    cols: int
    series_uid: str
    pixels: np.ndarray  # (cols, rows), x = column index


def _read_slice(path: Path) -> _Slice:
    buf = path.read_bytes()
    if len(buf) < 132 or buf[128:132] != b"DICM":
        raise FormatError(f"{path.name}: missing DICM marker", offset=128)
    elems = _parse_elements(buf, 132, path)

    ts = elems.get(TAG_TRANSFER_SYNTAX)
    if ts is None:
        raise FormatError(f"{path.name}: no transfer syntax in file meta")
    syntax = ts[1].decode("ascii").strip("\x00 ")
    if syntax != EXPLICIT_VR_LITTLE_ENDIAN:
        raise FormatError(
            f"{path.name}: unsupported transfer syntax {syntax!r} "
            "(only explicit VR little endian is supported)")

    frames = elems.get(TAG_NUMBER_OF_FRAMES)
    if frames is not None and int(frames[1].decode("ascii").strip("\x00 ")) != 1:
        raise FormatError(f"{path.name}: multi-frame files are not supported")

    required = {
        TAG_SERIES_UID: "SeriesInstanceUID",
        TAG_IMAGE_POSITION: "ImagePositionPatient",
        TAG_IMAGE_ORIENTATION: "ImageOrientationPatient",
        TAG_PIXEL_SPACING: "PixelSpacing",
        TAG_ROWS: "Rows",
        TAG_COLS: "Columns",
        TAG_BITS_ALLOCATED: "BitsAllocated",
        TAG_PIXEL_DATA: "PixelData",
    }
    for tag, name in required.items():
        if tag not in elems:
            raise FormatError(f"{path.name}: missing required tag {name}")

    rows = _ushort(elems[TAG_ROWS][1])
    cols = _ushort(elems[TAG_COLS][1])
    bits = _ushort(elems[TAG_BITS_ALLOCATED][1])
    signed = (TAG_PIXEL_REPRESENTATION in elems
              and _ushort(elems[TAG_PIXEL_REPRESENTATION][1]) == 1)
    if bits == 16:
        dtype = np.dtype("<i2") if signed else np.dtype("<u2")
    elif bits == 8:
        dtype = np.dtype("<i1") if signed else np.dtype("<u1")
    else:
        raise FormatError(f"{path.name}: unsupported BitsAllocated {bits}")

    raw = elems[TAG_PIXEL_DATA][1]
    expected = rows * cols * dtype.itemsize
    if len(raw) < expected:
        raise FormatError(f"{path.name}: pixel data holds {len(raw)} bytes, "
                          f"expected {expected}")
    # pixel data is row-major (column index fastest); transpose to [x=col, y=row]
    pixels = np.frombuffer(raw[:expected], dtype=dtype).reshape(rows, cols).T
    pixels = pixels.astype(np.float32)

    slope = 1.0
    intercept = 0.0
    if TAG_RESCALE_SLOPE in elems:
        slope = _decimal_list(elems[TAG_RESCALE_SLOPE][1])[0]
    if TAG_RESCALE_INTERCEPT in elems:
        intercept = _decimal_list(elems[TAG_RESCALE_INTERCEPT][1])[0]
    if slope != 1.0 or intercept != 0.0:
        pixels = pixels * np.float32(slope) + np.float32(intercept)

    return _Slice(
        position=np.array(_decimal_list(elems[TAG_IMAGE_POSITION][1])),
        orientation=np.array(_decimal_list(elems[TAG_IMAGE_ORIENTATION][1])),
        pixel_spacing=np.array(_decimal_list(elems[TAG_PIXEL_SPACING][1])),
        rows=rows, cols=cols,
        series_uid=elems[TAG_SERIES_UID][1].decode("ascii").strip("\x00 "),
        pixels=pixels,
    )


def read_dicom_series(directory) -> ImageVolume:
    """Assemble one volume from a directory of single-frame MR slices.

    Slices are sorted by the projection of ImagePositionPatient onto the
    slice normal, so the listing order of the files never matters.
    """
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file())
    if not files:
        raise FormatError(f"no files in {directory}")
    slices = [_read_slice(p) for p in files]

    uids = {s.series_uid for s in slices}
    if len(uids) > 1:
        raise FormatError(f"mixed series in {directory}: found "
                          f"{len(uids)} SeriesInstanceUIDs")
    first = slices[0]
    for s in slices[1:]:
        if (s.rows, s.cols) != (first.rows, first.cols):
            raise GeometryError("slices disagree on matrix size")
        if not np.allclose(s.orientation, first.orientation, atol=1e-6):
            raise GeometryError("slices disagree on image orientation")
        if not np.allclose(s.pixel_spacing, first.pixel_spacing, atol=1e-6):
            raise GeometryError("slices disagree on pixel spacing")

    row_dir = first.orientation[:3]   # direction of increasing column index
    col_dir = first.orientation[3:]   # direction of increasing row index
    normal = np.cross(row_dir, col_dir)

    order = sorted(range(len(slices)),
                   key=lambda i: float(np.dot(slices[i].position, normal)))
    slices = [slices[i] for i in order]

    if len(slices) > 1:
        proj = np.array([float(np.dot(s.position, normal)) for s in slices])
        gaps = np.diff(proj)
        mean_gap = float(np.mean(gaps))
        if mean_gap <= 0:
            raise GeometryError("slice positions are not strictly increasing")
        if np.any(np.abs(gaps - mean_gap) > 0.01 * abs(mean_gap)):
            raise GeometryError(
                f"non-uniform slice spacing beyond 1%: gaps {gaps.tolist()}")
        slice_dir = (slices[-1].position - slices[0].position)
        slice_dir = slice_dir / np.linalg.norm(slice_dir)
    else:
        mean_gap = 1.0
        slice_dir = normal

    voxels = np.stack([s.pixels for s in slices], axis=2)
    spacing = (float(first.pixel_spacing[1]), float(first.pixel_spacing[0]),
               abs(mean_gap))
    direction = np.column_stack([row_dir, col_dir, slice_dir])
    meta = GridMeta((first.cols, first.rows, len(slices)), spacing,
                    slices[0].position, direction)
    return ImageVolume(meta, voxels)
