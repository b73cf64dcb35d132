"""Rigid poses built on scipy rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class Pose:
    """Position (m) and unit quaternion in scalar-last ``(x, y, z, w)`` order."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        q = np.array(self.orientation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(p).all() or not np.isfinite(q).all() or n == 0:
            raise ValueError("pose must be finite with a non-zero quaternion")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q / n)

    @classmethod
    def identity(cls, position=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(position, (0.0, 0.0, 0.0, 1.0))

    @classmethod
    def from_matrix(cls, position, matrix) -> "Pose":
        return cls(position, Rotation.from_matrix(matrix).as_quat())

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.orientation)

    @property
    def matrix(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def apply(self, points) -> np.ndarray:
        """Map points from this pose's local frame to the parent frame."""
        return self.rotation.apply(points) + self.position

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: ``other`` expressed in this pose's frame."""
        rot = self.rotation * other.rotation
        return Pose(self.apply(other.position), rot.as_quat())

    def inverse(self) -> "Pose":
        inv = self.rotation.inv()
        return Pose(-inv.apply(self.position), inv.as_quat())

    def translated(self, delta) -> "Pose":
        return Pose(self.position + np.asarray(delta, dtype=float), self.orientation)


def frame_from_normal(normal, u_hint) -> np.ndarray:
    """Right-handed matrix with columns (u, v, normal); u is ``u_hint`` made orthogonal."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    u = np.asarray(u_hint, dtype=float)
    u = u - (u @ n) * n
    u = u / np.linalg.norm(u)
    return np.column_stack([u, np.cross(n, u), n])


def rotation_between(a, b) -> Rotation:
    """Smallest rotation taking direction ``a`` onto direction ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.clip(a @ b, -1.0, 1.0))
    if s < 1e-12:
        if c > 0:
            return Rotation.identity()
        # antiparallel: any perpendicular axis works
        helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        perp = np.cross(a, helper)
        return Rotation.from_rotvec(np.pi * perp / np.linalg.norm(perp))
    return Rotation.from_rotvec(axis / s * np.arctan2(s, c))
