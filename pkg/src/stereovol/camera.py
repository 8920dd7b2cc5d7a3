"""Pinhole intrinsics and rectified stereo rig.

Axes are right (x), down (y), front (z) in the left camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """A geometric quantity is outside the valid domain (e.g. non-positive depth)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cu: float
    cv: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cu], [0.0, self.fy, self.cv], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "Intrinsics":
        """Intrinsics of a feature map downsampled by ``stride`` (pixel coords divided by stride)."""
        s = float(stride)
        return Intrinsics(self.fx / s, self.fy / s, self.cu / s, self.cv / s)


@dataclass(frozen=True)
class StereoRig:
    intrinsics: Intrinsics
    baseline: float

    def __post_init__(self):
        if self.baseline <= 0:
            raise DomainError(f"baseline must be positive, got {self.baseline}")

    @property
    def fx(self) -> float:
        return self.intrinsics.fx


@dataclass(frozen=True)
class FrustumCoord:
    u: float
    v: float
    d: float


@dataclass(frozen=True)
class WorldPoint:
    x: float
    y: float
    z: float


def unproject(c: FrustumCoord, k: Intrinsics) -> WorldPoint:
    if c.d <= 0:
        raise DomainError(f"depth must be positive, got {c.d}")
    return WorldPoint((c.u - k.cu) * c.d / k.fx, (c.v - k.cv) * c.d / k.fy, c.d)


def project(p: WorldPoint, k: Intrinsics) -> FrustumCoord:
    if p.z <= 0:
        raise DomainError(f"z must be positive, got {p.z}")
    return FrustumCoord(k.fx * p.x / p.z + k.cu, k.fy * p.y / p.z + k.cv, p.z)


def project_array(points: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Vectorised projection of (..., 3) camera-frame points to (..., 3) (u, v, z)."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    if np.any(z <= 0):
        raise DomainError("all points must have z > 0")
    return np.stack([k.fx * pts[..., 0] / z + k.cu, k.fy * pts[..., 1] / z + k.cv, z], axis=-1)


def unproject_array(uvd: np.ndarray, k: Intrinsics) -> np.ndarray:
    c = np.asarray(uvd, dtype=np.float64)
    d = c[..., 2]
    if np.any(d <= 0):
        raise DomainError("all depths must be positive")
    return np.stack([(c[..., 0] - k.cu) * d / k.fx, (c[..., 1] - k.cv) * d / k.fy, d], axis=-1)


def disparity_depth(rig: StereoRig, value: float, direction: str = "depth_to_disp") -> float:
    """Convert depth (m) to disparity (px) or back; the map fx*b/value is its own inverse."""
    if direction not in ("depth_to_disp", "disp_to_depth"):
        raise ValueError(f"unknown direction {direction!r}")
    if value <= 0:
        raise DomainError(f"value must be positive, got {value}")
    return rig.fx * rig.baseline / value


def depth_to_disparity(rig: StereoRig, depth):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DomainError("depth must be positive")
    return rig.fx * rig.baseline / depth
