import gzip
import hashlib
import struct

import numpy as np
import pytest

from mammoforge.errors import FormatError
from mammoforge.nifti import read_nifti, write_nifti
from mammoforge.volume import GridMeta, ImageVolume, LabelVolume

from conftest import make_image, make_labels, random_meta, random_rotation


def reference_label_nifti(path, labels_xyz, spacing=(1.0, 1.0, 1.0)):
    """Independent minimal writer used as the format oracle for label files."""
    nx, ny, nz = labels_xyz.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 68, 1002)        # intent_code = label
    struct.pack_into("<hh", hdr, 70, 2, 8)       # datatype uint8, bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)      # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)        # scl_slope
    struct.pack_into("<hh", hdr, 252, 0, 1)      # qform, sform codes
    struct.pack_into("<4f", hdr, 280, spacing[0], 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, spacing[1], 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, spacing[2], 0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00" * 4)
        fh.write(labels_xyz.astype("<u1").tobytes(order="F"))


class TestRoundTrip:
    def test_scalar_round_trip_bit_identical(self, rng, tmp_path):
        vol = make_image(rng.random((7, 6, 5)).astype(np.float32),
                         spacing=(0.7, 1.1, 2.4), origin=(-5, 3, 12))
        path = tmp_path / "v.nii"
        write_nifti(vol, path)
        back = read_nifti(path)
        assert isinstance(back, ImageVolume)
        assert np.array_equal(back.voxels, vol.voxels)
        assert back.meta.dims == vol.meta.dims
        assert np.allclose(back.meta.spacing, vol.meta.spacing, atol=1e-6)
        assert np.allclose(back.meta.origin, vol.meta.origin, atol=1e-6)
        assert np.allclose(back.meta.direction, vol.meta.direction, atol=1e-6)

    def test_label_round_trip_voxel_exact(self, rng, tmp_path):
        lab = make_labels(rng.integers(0, 4, size=(5, 5, 5)))
        path = tmp_path / "m.nii"
        write_nifti(lab, path)
        back = read_nifti(path)
        assert isinstance(back, LabelVolume)
        assert np.array_equal(back.labels, lab.labels)

    def test_gzip_round_trip(self, rng, tmp_path):
        vol = make_image(rng.random((4, 4, 4)).astype(np.float32))
        path = tmp_path / "v.nii.gz"
        write_nifti(vol, path)
        assert path.read_bytes()[:2] == b"\x1f\x8b"
        back = read_nifti(path)
        assert np.array_equal(back.voxels, vol.voxels)

    def test_two_writes_byte_identical(self, rng, tmp_path):
        vol = make_image(rng.random((6, 6, 6)).astype(np.float32))
        p1, p2 = tmp_path / "a.nii", tmp_path / "b.nii"
        write_nifti(vol, p1)
        write_nifti(vol, p2)
        assert (hashlib.sha256(p1.read_bytes()).hexdigest()
                == hashlib.sha256(p2.read_bytes()).hexdigest())

    def test_two_gzip_writes_byte_identical(self, rng, tmp_path):
        vol = make_image(rng.random((6, 6, 6)).astype(np.float32))
        p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_nifti(vol, p1)
        write_nifti(vol, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_random_orientation_survives(self, rng, tmp_path):
        for i in range(25):
            meta = random_meta(rng, max_dim=8)
            vol = ImageVolume(meta, rng.random(meta.dims).astype(np.float32))
            path = tmp_path / f"r{i}.nii"
            write_nifti(vol, path)
            back = read_nifti(path)
            assert np.max(np.abs(back.meta.direction - meta.direction)) < 1e-6
            assert np.allclose(back.meta.spacing, meta.spacing, atol=1e-6)
            assert np.allclose(back.meta.origin, meta.origin, atol=1e-4)


class TestAgainstReferenceWriter:
    def test_label_file_from_reference_writer(self, rng, tmp_path):
        labels = rng.integers(0, 3, size=(4, 3, 2)).astype(np.uint8)
        path = tmp_path / "ref.nii"
        reference_label_nifti(path, labels)
        back = read_nifti(path)
        assert isinstance(back, LabelVolume)
        assert np.array_equal(back.labels, labels)
        assert back.label_set() == set(np.unique(labels).tolist())

    def test_own_label_write_matches_reference_layout(self, tmp_path):
        labels = np.arange(8, dtype=np.uint8).reshape(2, 2, 2) % 3
        ours = tmp_path / "ours.nii"
        ref = tmp_path / "ref.nii"
        write_nifti(make_labels(labels), ours)
        reference_label_nifti(ref, labels)
        a, b = ours.read_bytes(), ref.read_bytes()
        # identical data section and identical layout-critical header fields
        assert a[352:] == b[352:]
        for off, size in ((0, 4), (40, 16), (68, 6), (108, 4), (344, 4)):
            assert a[off:off + size] == b[off:off + size]


class TestErrors:
    def test_truncated_file(self, rng, tmp_path):
        vol = make_image(rng.random((6, 6, 6)).astype(np.float32))
        path = tmp_path / "t.nii"
        write_nifti(vol, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 40])
        with pytest.raises(FormatError, match="truncated"):
            read_nifti(path)

    def test_header_too_short(self, tmp_path):
        path = tmp_path / "short.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(FormatError, match="byte offset"):
            read_nifti(path)

    def test_bad_magic(self, rng, tmp_path):
        vol = make_image(rng.random((3, 3, 3)).astype(np.float32))
        path = tmp_path / "m.nii"
        write_nifti(vol, path)
        data = bytearray(path.read_bytes())
        data[344:348] = b"xxx\x00"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            read_nifti(path)

    def test_unsupported_datatype_names_code(self, rng, tmp_path):
        vol = make_image(rng.random((3, 3, 3)).astype(np.float32))
        path = tmp_path / "d.nii"
        write_nifti(vol, path)
        data = bytearray(path.read_bytes())
        struct.pack_into("<h", data, 70, 64)  # float64: not in the subset
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="unsupported datatype code 64"):
            read_nifti(path)

    def test_two_file_magic_rejected(self, rng, tmp_path):
        vol = make_image(rng.random((3, 3, 3)).astype(np.float32))
        path = tmp_path / "p.nii"
        write_nifti(vol, path)
        data = bytearray(path.read_bytes())
        data[344:348] = b"ni1\x00"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="two-file"):
            read_nifti(path)

    def test_scl_slope_applied(self, tmp_path):
        vol = make_image(np.ones((2, 2, 2), dtype=np.float32))
        path = tmp_path / "s.nii"
        write_nifti(vol, path)
        data = bytearray(path.read_bytes())
        struct.pack_into("<ff", data, 112, 2.0, 10.0)  # slope, intercept
        path.write_bytes(bytes(data))
        back = read_nifti(path)
        assert np.allclose(back.voxels, 12.0)
