"""BEV anchors, distance-based target assignment, box coding, losses and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import Box3D, boxes_to_array, corner_distance_matrix, corners_8_array, points_in_bev_box
from .evaluation import rotated_iou_bev
from .tensor import ContractError, Tensor
from .volumes import VoxelGrid

NMS_IOU_THRESHOLD = 0.6


@dataclass(frozen=True)
class ClassConfig:
    name: str
    size: tuple[float, float, float]  # (h, w, l)
    y_anchor: float
    gamma: float
    n_theta: int = 4


CLASS_DEFAULTS = {
    "Car": ClassConfig("Car", (1.56, 1.6, 3.9), 0.825, 1.0),
    "Pedestrian": ClassConfig("Pedestrian", (1.73, 0.6, 0.8), 0.74, 5.0),
    "Cyclist": ClassConfig("Cyclist", (1.73, 0.6, 1.76), 0.74, 5.0),
}


@dataclass
class AnchorSet:
    """Anchors ordered (orientation, z cell, x cell), i.e. the flattening of an (A, D_V, W_V) head map."""

    boxes: np.ndarray  # (N, 7)
    n_theta: int
    bev_shape: tuple[int, int]  # (D_V, W_V)
    cls: ClassConfig

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def orientations(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_theta) / self.n_theta


@dataclass
class AssignmentResult:
    labels: np.ndarray  # (N,) 1 positive, 0 negative
    matched: np.ndarray  # (N,) GT index, -1 for negatives
    centerness: np.ndarray  # (N,) target in [1/e, 1] for positives, 0 otherwise
    distance: np.ndarray  # (N,) corner distance to the matched GT (inf for negatives)
    k_per_gt: np.ndarray
    n_per_gt: np.ndarray

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels)


def generate_anchors(grid: VoxelGrid, cls: ClassConfig | str = "Car") -> AnchorSet:
    if isinstance(cls, str):
        cls = CLASS_DEFAULTS[cls]
    centers = grid.bev_centers()  # (D, W, 2)
    d, w = centers.shape[:2]
    h_a, w_a, l_a = cls.size
    rows = []
    for k in range(cls.n_theta):
        theta = 2 * math.pi * k / cls.n_theta
        block = np.empty((d, w, 7))
        block[..., 0] = centers[..., 0]
        block[..., 1] = cls.y_anchor
        block[..., 2] = centers[..., 1]
        block[..., 3:6] = (h_a, w_a, l_a)
        block[..., 6] = theta
        rows.append(block.reshape(-1, 7))
    return AnchorSet(np.concatenate(rows), cls.n_theta, (d, w), cls)


def count_bev_voxels(grid: VoxelGrid, box: np.ndarray) -> int:
    return int(points_in_bev_box(grid.bev_centers(), box).sum())


def assign_targets(anchors: AnchorSet, gts: Sequence[Box3D] | np.ndarray, gamma: float, grid: VoxelGrid) -> AssignmentResult:
    """Top-N nearest anchors (mean corner distance) per GT are positive, N = max(1, round(gamma * k)).

    k counts BEV voxel centres inside the GT rectangle.  An anchor claimed by
    several GTs goes to the nearest one (lower GT index on ties).
    """
    if len(anchors) == 0:
        raise ContractError("empty anchor set")
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    g = gts if isinstance(gts, np.ndarray) else boxes_to_array(gts)
    g = g.reshape(-1, 7)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.inf)
    ks = np.zeros(len(g), dtype=np.int64)
    ns = np.zeros(len(g), dtype=np.int64)
    if len(g) == 0:
        return AssignmentResult(labels, matched, np.zeros(n), dist, ks, ns)
    dmat = corner_distance_matrix(anchors.boxes, g)  # (N, G)
    for j in range(len(g)):
        ks[j] = count_bev_voxels(grid, g[j])
        ns[j] = min(n, max(1, int(math.floor(gamma * ks[j] + 0.5))))
        top = np.argsort(dmat[:, j], kind="stable")[: ns[j]]
        better = dmat[top, j] < dist[top]
        sel = top[better]
        matched[sel] = j
        dist[sel] = dmat[sel, j]
    labels[matched >= 0] = 1
    ctr = np.zeros(n)
    for j in range(len(g)):
        idx = np.flatnonzero(matched == j)
        if len(idx) == 0:
            continue
        d = dist[idx]
        lo, hi = d.min(), d.max()
        ctr[idx] = 1.0 if hi == lo else np.exp(-(d - lo) / (hi - lo))
    return AssignmentResult(labels, matched, ctr, dist, ks, ns)


def centerness(assign: AssignmentResult) -> np.ndarray:
    """Per-positive centerness targets (order of ``assign.positives``)."""
    return assign.centerness[assign.positives]


# ---------------------------------------------------------------------------
# box coding
# ---------------------------------------------------------------------------


def wrap_angle_diff(diff: np.ndarray, n_theta: int) -> np.ndarray:
    """Wrap to (-pi/n, pi/n] modulo 2*pi/n."""
    period = 2 * np.pi / n_theta
    half = np.pi / n_theta
    out = np.mod(np.asarray(diff, dtype=np.float64) + half, period) - half
    return np.where(out <= -half, out + period, out)


def encode_boxes(anchors: np.ndarray, gts: np.ndarray, n_theta: int) -> np.ndarray:
    """Separable regression targets (N, 7) such that decode(anchor, target) reproduces the GT."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    out = np.empty_like(a)
    out[:, :3] = g[:, :3] - a[:, :3]
    out[:, 3:6] = np.log(g[:, 3:6] / a[:, 3:6])
    frac = wrap_angle_diff(g[:, 6] - a[:, 6], n_theta) * n_theta / np.pi
    out[:, 6] = np.arctanh(np.clip(frac, -(1 - 1e-6), 1 - 1e-6))
    return out


def decode_array(anchors: np.ndarray, deltas: np.ndarray, n_theta: int) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 7)
    out = np.empty_like(a)
    out[:, :3] = a[:, :3] + d[:, :3]
    out[:, 3:6] = a[:, 3:6] * np.exp(d[:, 3:6])
    out[:, 6] = a[:, 6] + np.pi / n_theta * np.tanh(d[:, 6])
    return out


def decode_box(anchor: Box3D, delta, n_theta: int = 4) -> Box3D:
    if n_theta < 1:
        raise ContractError("n_theta must be >= 1")
    return Box3D.from_array(decode_array(anchor.as_array(), np.asarray(delta, dtype=np.float64), n_theta)[0])


def decode_tensor(anchors: np.ndarray, deltas: Tensor, n_theta: int) -> list[Tensor]:
    """Differentiable decode of (P, 7) deltas -> [x, y, z, h, w, l, theta] tensors of shape (P,)."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    cols = [deltas[:, i] for i in range(7)]
    out = [cols[i] + Tensor(a[:, i]) for i in range(3)]
    out += [T.exp(cols[i]) * Tensor(a[:, i]) for i in range(3, 6)]
    out.append(T.tanh(cols[6]) * (np.pi / n_theta) + Tensor(a[:, 6]))
    return out


_CORNER_SIGNS = np.array(
    [[1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1], [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1]],
    dtype=np.float64,
)  # (length, width, height) signs in corners_8 order; +height is the bottom face


def corners_tensor(params: list[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable corners_8 of decoded boxes -> X, Y, Z tensors of shape (P, 8)."""
    x, y, z, h, w, l, th = params
    p = x.shape[0]

    def rep(t):
        return T.repeat(T.reshape(t, (p, 1)), 8, axis=1)

    c, s = rep(T.cos(th)), rep(T.sin(th))
    sl = Tensor(np.broadcast_to(_CORNER_SIGNS[:, 0] / 2, (p, 8)).copy())
    sw = Tensor(np.broadcast_to(_CORNER_SIGNS[:, 1] / 2, (p, 8)).copy())
    sh = Tensor(np.broadcast_to(_CORNER_SIGNS[:, 2] / 2, (p, 8)).copy())
    lx, lz = rep(l) * sl, rep(w) * sw
    X = rep(x) + c * lx + s * lz
    Z = rep(z) - s * lx + c * lz
    Y = rep(y) + rep(h) * sh
    return X, Y, Z


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def regression_loss(anchors: AnchorSet | np.ndarray, deltas: Tensor, assign: AssignmentResult,
                    gts: Sequence[Box3D] | np.ndarray, mode: str = "separable", n_theta: int | None = None,
                    beta: float = 1.0, corner_flip_min: bool = False) -> Tensor:
    """Centerness-weighted smooth-L1 box loss over positives, normalised by N_pos.

    ``deltas`` holds one (7,) row per anchor.  ``separable`` penalises the
    offset residual per parameter (summed); ``joint_corners`` penalises the
    mean L1 distance between the 8 decoded and GT corners.
    """
    if mode not in ("separable", "joint_corners"):
        raise ContractError(f"unknown regression mode {mode!r}")
    if assign.n_pos == 0:
        raise ContractError("no positive anchors")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    if n_theta is None:
        n_theta = anchors.n_theta if isinstance(anchors, AnchorSet) else 4
    g = gts if isinstance(gts, np.ndarray) else boxes_to_array(gts)
    pos = assign.positives
    a_pos = boxes[pos]
    g_pos = g.reshape(-1, 7)[assign.matched[pos]]
    weight = Tensor(assign.centerness[pos])
    rows = (pos[:, None] * 7 + np.arange(7)[None]).reshape(-1)
    d_pos = T.reshape(T.take(T.reshape(deltas, (-1,)), rows), (len(pos), 7))
    if mode == "separable":
        target = encode_boxes(a_pos, g_pos, n_theta)
        per = T.tsum(T.smooth_l1_elementwise(d_pos - Tensor(target), beta), axis=1)
    else:
        X, Y, Z = corners_tensor(decode_tensor(a_pos, d_pos, n_theta))
        per = _corner_l1(X, Y, Z, corners_8_array(g_pos))
        if corner_flip_min:
            flipped = g_pos.copy()
            flipped[:, 6] += np.pi
            per = T.minimum(per, _corner_l1(X, Y, Z, corners_8_array(flipped)))
        per = T.smooth_l1_elementwise(per, beta)
    return T.tsum(per * weight) * (1.0 / assign.n_pos)


def _corner_l1(X: Tensor, Y: Tensor, Z: Tensor, gc: np.ndarray) -> Tensor:
    d = T.tabs(X - Tensor(gc[..., 0])) + T.tabs(Y - Tensor(gc[..., 1])) + T.tabs(Z - Tensor(gc[..., 2]))
    return T.mean(d, axis=1)


def focal_loss(logits: Tensor, assign: AssignmentResult | np.ndarray, alpha: float = 0.25, gamma_f: float = 2.0,
               n_pos: int | None = None) -> Tensor:
    """Sigmoid focal loss summed over anchors and divided by N_pos (or 1 if there are none)."""
    labels = assign.labels if isinstance(assign, AssignmentResult) else np.asarray(assign)
    if n_pos is None:
        n_pos = int(labels.sum())
    x = T.reshape(logits, (-1,))
    t = Tensor(labels.astype(np.float64).reshape(-1))
    log_p = -T.softplus(-x)
    log_1mp = -T.softplus(x)
    pos = T.exp(log_1mp * gamma_f) * log_p * (-alpha)
    neg = T.exp(log_p * gamma_f) * log_1mp * (-(1 - alpha))
    per = t * pos + (1.0 - t) * neg
    return T.tsum(per) * (1.0 / max(n_pos, 1))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    t = Tensor(np.asarray(target, dtype=np.float64))
    return T.softplus(logits) - t * logits


def centerness_loss(pred_logits: Tensor, assign: AssignmentResult) -> Tensor:
    """Mean BCE between sigmoid(pred) and centerness targets over positives."""
    if assign.n_pos == 0:
        raise ContractError("no positive anchors")
    pos = assign.positives
    picked = T.take(T.reshape(pred_logits, (-1,)), pos)
    return T.mean(bce_with_logits(picked, assign.centerness[pos]))


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------


def bev_nms(boxes: Sequence[Box3D], scores, iou_threshold: float = NMS_IOU_THRESHOLD) -> list[int]:
    """Greedy rotated-BEV NMS; ties in score go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(boxes)), key=lambda i: (-s[i], i))
    kept: list[int] = []
    for i in order:
        if all(rotated_iou_bev(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept
