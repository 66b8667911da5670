"""Rigid 6-DOF world-space transforms with a ZYX Euler parameterization."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def euler_zyx_to_matrix(angles) -> np.ndarray:
    """Rotation matrix R = Rz(az) @ Ry(ay) @ Rx(ax) for angles (ax, ay, az)."""
    ax, ay, az = (float(a) for a in angles)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def matrix_to_euler_zyx(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_zyx_to_matrix`; gimbal-safe at |r20| -> 1."""
    r = np.asarray(r, dtype=np.float64)
    sy = -r[2, 0]
    sy = np.clip(sy, -1.0, 1.0)
    ay = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-10:
        ax = np.arctan2(r[2, 1], r[2, 2])
        az = np.arctan2(r[1, 0], r[0, 0])
    else:
        # gimbal lock: az is unrecoverable from r; fold it into ax
        ax = np.arctan2(-r[1, 2], r[1, 1])
        az = 0.0
    return np.array([ax, ay, az])


@dataclass(frozen=True)
class RigidTransform:
    """World-space rigid map ``x -> R (x - center) + center + translation``.

    Angles are radians in ZYX convention (x applied first); translation and
    center are mm.
    """

    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("angles", "translation", "center"):
            vals = tuple(float(v) for v in np.asarray(getattr(self, name)).reshape(3))
            if not all(np.isfinite(vals)):
                raise ValidationError(f"{name} must be finite, got {vals}")
            object.__setattr__(self, name, vals)

    @property
    def matrix(self) -> np.ndarray:
        return euler_zyx_to_matrix(self.angles)

    def apply(self, points) -> np.ndarray:
        """Transform a (3,) point or (N, 3) array of world points."""
        pts = np.asarray(points, dtype=np.float64)
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        return (pts - c) @ self.matrix.T + c + t

    def inverse(self) -> "RigidTransform":
        """Transform such that ``inverse().apply(apply(x)) == x``."""
        r_inv = self.matrix.T
        t_inv = -(r_inv @ np.asarray(self.translation))
        return RigidTransform(angles=tuple(matrix_to_euler_zyx(r_inv)),
                              translation=tuple(t_inv),
                              center=self.center)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        r1, r2 = other.matrix, self.matrix
        c1 = np.asarray(other.center)
        c2 = np.asarray(self.center)
        t1 = np.asarray(other.translation)
        t2 = np.asarray(self.translation)
        # self(other(x)) = R2 R1 x + R2 (c1 + t1 - R1 c1 - c2) + c2 + t2
        r = r2 @ r1
        offset = r2 @ (c1 + t1 - r1 @ c1 - c2) + c2 + t2
        # re-express about other's center: r (x - c1) + c1 + t
        t = offset + r @ c1 - c1
        return RigidTransform(angles=tuple(matrix_to_euler_zyx(r)),
                              translation=tuple(t), center=tuple(c1))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    def to_json_dict(self) -> dict:
        return {
            "angles_rad": list(self.angles),
            "translation_mm": list(self.translation),
            "center_mm": list(self.center),
        }

    @staticmethod
    def from_json_dict(data: dict) -> "RigidTransform":
        try:
            return RigidTransform(angles=tuple(data["angles_rad"]),
                                  translation=tuple(data["translation_mm"]),
                                  center=tuple(data["center_mm"]))
        except KeyError as exc:
            raise ValidationError(f"transform JSON missing field {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path) -> "RigidTransform":
        with open(path, "r", encoding="utf-8") as fh:
            return RigidTransform.from_json_dict(json.load(fh))
