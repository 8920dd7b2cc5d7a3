"""Oriented 3D boxes in the camera frame and their corner sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, astuple
from typing import Iterable

import numpy as np

TWO_PI = 2.0 * math.pi

# local (length, width) signs, counter-clockwise from front-left seen from above
_BEV_SIGNS = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])


def normalize_angle(theta: float) -> float:
    t = math.fmod(theta, TWO_PI)
    if t < 0:
        t += TWO_PI
    if t >= TWO_PI:
        t -= TWO_PI
    return t


@dataclass(frozen=True)
class Box3D:
    """Center (x, y, z), size (h, w, l) and yaw ``theta`` about the vertical (y) axis.

    ``y`` is the box centre along the down axis.  Yaw follows the KITTI
    ``rotation_y`` convention: the length axis points along (cos t, -sin t) in
    (x, z).
    """

    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a))


def boxes_to_array(boxes: Iterable[Box3D]) -> np.ndarray:
    rows = [b.as_array() for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def corners_bev_array(boxes: np.ndarray) -> np.ndarray:
    """(N, 7) boxes -> (N, 4, 2) BEV (x, z) corners in canonical order."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    c, s = np.cos(b[:, 6]), np.sin(b[:, 6])
    lx = _BEV_SIGNS[None, :, 0] * b[:, 5:6] / 2
    lz = _BEV_SIGNS[None, :, 1] * b[:, 4:5] / 2
    x = b[:, 0:1] + c[:, None] * lx + s[:, None] * lz
    z = b[:, 2:3] - s[:, None] * lx + c[:, None] * lz
    return np.stack([x, z], axis=-1)


def corners_8_array(boxes: np.ndarray) -> np.ndarray:
    """(N, 7) boxes -> (N, 8, 3) corners: bottom four (y + h/2) then top four."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    bev = corners_bev_array(b)
    n = len(b)
    out = np.empty((n, 8, 3))
    out[:, :4, 0] = out[:, 4:, 0] = bev[..., 0]
    out[:, :4, 2] = out[:, 4:, 2] = bev[..., 1]
    out[:, :4, 1] = (b[:, 1] + b[:, 3] / 2)[:, None]
    out[:, 4:, 1] = (b[:, 1] - b[:, 3] / 2)[:, None]
    return out


def corners_bev(b: Box3D) -> np.ndarray:
    return corners_bev_array(b.as_array()[None])[0]


def corners_8(b: Box3D) -> np.ndarray:
    return corners_8_array(b.as_array()[None])[0]


def corner_distance_matrix(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(N, 7) x (M, 7) -> (N, M) mean BEV distance between corresponding corners.

    Top and bottom corners share BEV positions, so the 8-corner mean equals the
    mean over the 4 BEV corners.
    """
    ca = corners_bev_array(a)[:, None]  # (N,1,4,2)
    cg = corners_bev_array(g)[None]  # (1,M,4,2)
    return np.sqrt(((ca - cg) ** 2).sum(-1)).mean(-1)


def corner_distance(a: Box3D, g: Box3D) -> float:
    c8a = corners_8(a)
    c8g = corners_8(g)
    d = np.sqrt((c8a[:, 0] - c8g[:, 0]) ** 2 + (c8a[:, 2] - c8g[:, 2]) ** 2)
    return float(d.sum() / 8.0)


def points_in_bev_box(points_xz: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Boolean mask of (..., 2) (x, z) points inside a box's BEV rectangle (boundary inclusive)."""
    p = np.asarray(points_xz, dtype=np.float64)
    dx = p[..., 0] - box[0]
    dz = p[..., 1] - box[2]
    c, s = math.cos(box[6]), math.sin(box[6])
    along = c * dx - s * dz
    across = s * dx + c * dz
    return (np.abs(along) <= box[5] / 2 + 1e-12) & (np.abs(across) <= box[4] / 2 + 1e-12)
