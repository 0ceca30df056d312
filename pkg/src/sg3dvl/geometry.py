"""Axis-aligned 3D boxes and overlap computations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by center and per-axis extent (meters)."""

    center: Vec3
    size: Vec3

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def corners(self) -> np.ndarray:
        """The 8 corners, shape (8, 3), in lexicographic (-,+) order per axis."""
        lo, hi = self.min_corner, self.max_corner
        out = np.empty((8, 3))
        for idx in range(8):
            for ax in range(3):
                out[idx, ax] = hi[ax] if (idx >> (2 - ax)) & 1 else lo[ax]
        return out

    def volume(self) -> float:
        return float(np.prod(self.size))

    def contains_box(self, other: "Aabb") -> bool:
        return bool(
            np.all(other.min_corner >= self.min_corner - 1e-9)
            and np.all(other.max_corner <= self.max_corner + 1e-9)
        )


def iou_aabb(a: Aabb, b: Aabb) -> float:
    """Intersection-over-union of two axis-aligned boxes, in [0, 1]."""
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    edge = np.clip(hi - lo, 0.0, None)
    inter = float(np.prod(edge))
    union = a.volume() + b.volume() - inter
    return inter / union if union > 0 else 0.0


def box_position_vector(box: Aabb) -> np.ndarray:
    """27-dim positional attribute vector: center (3) plus the 8 corners (24)."""
    return np.concatenate([np.asarray(box.center), box.corners().ravel()])
