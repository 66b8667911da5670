import numpy as np
import pytest

from mammoforge.errors import ValidationError
from mammoforge.preprocess import (
    WindowSpec,
    apply_window,
    denoise_gaussian,
    normalize_percentile,
)

from conftest import make_image


class TestDenoise:
    def test_constant_volume_unchanged(self):
        vol = make_image(np.full((8, 8, 8), 4.2, dtype=np.float32))
        out = denoise_gaussian(vol, 1.0)
        assert np.allclose(out.voxels, 4.2, atol=1e-6)

    def test_impulse_center_matches_analytic_kernel(self):
        # impulse response center of a 3-D Gaussian: (2 pi sigma^2)^(-3/2)
        n = 31
        arr = np.zeros((n, n, n), dtype=np.float32)
        arr[n // 2, n // 2, n // 2] = 1.0
        out = denoise_gaussian(make_image(arr), 1.0)
        expected = (2 * np.pi) ** -1.5
        center = out.voxels[n // 2, n // 2, n // 2]
        assert abs(center - expected) / expected < 0.05

    def test_physical_units_respect_spacing(self):
        # sigma 2 mm on 2 mm spacing equals sigma 1 voxel on 1 mm spacing
        arr = np.zeros((21, 21, 21), dtype=np.float32)
        arr[10, 10, 10] = 1.0
        out_fine = denoise_gaussian(make_image(arr, spacing=(1, 1, 1)), 1.0)
        out_coarse = denoise_gaussian(make_image(arr, spacing=(2, 2, 2)), 2.0)
        assert np.allclose(out_fine.voxels, out_coarse.voxels, atol=1e-6)

    def test_tiny_sigma_identity(self, rng):
        vol = make_image(rng.random((10, 10, 10)).astype(np.float32))
        out = denoise_gaussian(vol, 0.01)
        assert np.max(np.abs(out.voxels - vol.voxels)) < 1e-4

    def test_mean_preserved_interior(self, rng):
        vol = make_image(rng.random((24, 24, 24)).astype(np.float32))
        out = denoise_gaussian(vol, 0.8)
        a = vol.voxels[4:-4, 4:-4, 4:-4].mean()
        b = out.voxels[4:-4, 4:-4, 4:-4].mean()
        assert abs(a - b) / a < 0.001

    def test_commutes_with_scaling(self, rng):
        values = rng.random((12, 12, 12)).astype(np.float32)
        a = denoise_gaussian(make_image(values * 5.0), 1.0).voxels
        b = denoise_gaussian(make_image(values), 1.0).voxels * 5.0
        assert np.allclose(a, b, rtol=1e-6)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValidationError):
            denoise_gaussian(make_image(np.zeros((3, 3, 3), np.float32)), 0.0)


class TestNormalize:
    def test_full_range_endpoints(self):
        arr = np.arange(101, dtype=np.float32).reshape(101, 1, 1)
        res = normalize_percentile(make_image(arr), 0, 100)
        assert not res.degenerate
        assert res.volume.voxels.min() == 0.0
        assert res.volume.voxels.max() == 1.0

    def test_clamping_above_high_percentile(self):
        arr = np.arange(101, dtype=np.float32).reshape(101, 1, 1)
        res = normalize_percentile(make_image(arr), 1, 99)
        # sort-based oracle: the 99th percentile of 0..100 is 99.0
        srt = np.sort(arr.ravel())
        hi = np.percentile(srt, 99)
        above = arr.ravel() > hi
        assert np.all(res.volume.voxels.ravel()[above] == 1.0)

    def test_degenerate_volume_flagged(self):
        res = normalize_percentile(make_image(np.full((4, 4, 4), 3.0, np.float32)))
        assert res.degenerate
        assert np.all(res.volume.voxels == 0)

    def test_output_in_unit_interval(self, rng):
        res = normalize_percentile(make_image(
            (rng.random((10, 10, 10)) * 100 - 50).astype(np.float32)), 2, 98)
        assert res.volume.voxels.min() >= 0.0
        assert res.volume.voxels.max() <= 1.0

    def test_idempotent_when_range_attained(self, rng):
        # exact when the percentile cuts are the attained extremes
        arr = (rng.random((12, 12, 12)) * 10).astype(np.float32)
        res1 = normalize_percentile(make_image(arr), 0, 100)
        assert res1.volume.voxels.min() == 0.0 and res1.volume.voxels.max() == 1.0
        res2 = normalize_percentile(res1.volume, 0, 100)
        assert np.allclose(res1.volume.voxels, res2.volume.voxels, atol=1e-7)
        # near-exact for interior percentiles on dense data (clamped tails
        # pile mass onto 0 and 1, pinning the cuts up to order statistics)
        res3 = normalize_percentile(make_image(arr), 5, 95)
        res4 = normalize_percentile(res3.volume, 5, 95)
        assert np.allclose(res3.volume.voxels, res4.volume.voxels, atol=5e-3)

    def test_bad_percentiles(self):
        vol = make_image(np.zeros((3, 3, 3), np.float32))
        with pytest.raises(ValidationError):
            normalize_percentile(vol, 50, 50)
        with pytest.raises(ValidationError):
            normalize_percentile(vol, -1, 99)


class TestWindow:
    def test_identity_window(self, rng):
        vol = make_image(rng.random((6, 6, 6)).astype(np.float32))
        out = apply_window(vol, WindowSpec(0.0, 1.0))
        assert np.allclose(out.voxels, vol.voxels, atol=1e-7)

    def test_midpoint(self):
        vol = make_image(np.full((2, 2, 2), 15.0, np.float32))
        out = apply_window(vol, WindowSpec(10.0, 20.0))
        assert np.allclose(out.voxels, 0.5)

    def test_clamp(self):
        vol = make_image(np.full((2, 2, 2), 25.0, np.float32))
        out = apply_window(vol, WindowSpec(10.0, 20.0))
        assert np.all(out.voxels == 1.0)

    def test_invalid_window(self):
        with pytest.raises(ValidationError):
            WindowSpec(5.0, 5.0)
