"""Shared test helpers and fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from mammoforge.volume import GridMeta, ImageVolume, LabelVolume


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random 3x3 rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_meta(rng: np.random.Generator, max_dim: int = 24) -> GridMeta:
    dims = tuple(int(d) for d in rng.integers(2, max_dim, size=3))
    spacing = rng.uniform(0.4, 3.0, size=3)
    origin = rng.uniform(-100, 100, size=3)
    return GridMeta(dims, spacing, origin, random_rotation(rng))


def make_image(values, spacing=(1, 1, 1), origin=(0, 0, 0), direction=None):
    values = np.asarray(values, dtype=np.float32)
    meta = GridMeta(values.shape, spacing, origin, direction)
    return ImageVolume(meta, values)


def make_labels(values, spacing=(1, 1, 1), origin=(0, 0, 0), direction=None):
    values = np.asarray(values)
    meta = GridMeta(values.shape, spacing, origin, direction)
    return LabelVolume(meta, values)


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
