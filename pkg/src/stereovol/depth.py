"""Plane-sweep cost volume reduction, soft arg-min depth and depth supervision."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor
from .volumes import PlaneSweepVolume, VoxelGrid, interp_plan, apply_plan


@dataclass
class CostVolume:
    cost: Tensor  # (D, H, W)
    candidates: np.ndarray
    features: Tensor | None = None  # last feature map before the 1-channel projection


@dataclass
class SparseDepthMap:
    depth: np.ndarray  # (H, W); invalid pixels hold 0
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise DimensionError("depth and mask shapes differ")
        if np.any(self.depth[self.valid] <= 0):
            raise ContractError("valid depths must be positive")

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def from_dense(cls, depth: np.ndarray) -> "SparseDepthMap":
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(np.where(valid, depth, 0.0), valid)

    def in_range(self, z_range: tuple[float, float]) -> "SparseDepthMap":
        lo, hi = z_range
        keep = self.valid & (self.depth >= lo) & (self.depth <= hi)
        return SparseDepthMap(np.where(keep, self.depth, 0.0), keep)


def reduce_to_cost(psv: PlaneSweepVolume | Tensor, layers: Sequence[tuple[Tensor, Tensor | None]],
                   candidates=None, upsample_to: tuple[int, int] | None = None) -> CostVolume:
    """Run a conv stack over the PSV; the last layer must emit one channel.

    ``layers`` is a list of (kernel, bias) pairs.  Kernels are applied with
    'same' padding and ReLU between layers.  The input to the final layer is
    kept as ``features``.
    """
    if isinstance(psv, PlaneSweepVolume):
        x, candidates = psv.feature, psv.depth_candidates
    else:
        x = psv
    if not layers:
        raise ContractError("need at least one layer")
    if layers[-1][0].shape[0] != 1:
        raise DimensionError(f"last layer must produce 1 channel, got {layers[-1][0].shape[0]}")
    feats = x
    for i, (w, b) in enumerate(layers):
        if w.shape[1] != feats.shape[0]:
            raise DimensionError(f"layer {i} expects {w.shape[1]} channels, got {feats.shape[0]}")
        if i == len(layers) - 1:
            last = feats
        pad = tuple(k // 2 for k in w.shape[2:])
        feats = T.conv_nd(feats, w, 1, pad, bias=b)
        if i < len(layers) - 1:
            feats = T.relu(feats)
    cost = T.reshape(feats, feats.shape[1:])
    if upsample_to is not None:
        cost = upsample_hw(cost, upsample_to)
    return CostVolume(cost, np.asarray(candidates, dtype=np.float64), last)


def upsample_hw(cost: Tensor, size: tuple[int, int]) -> Tensor:
    """Linear upsampling of the (H, W) axes of a (D, H, W) volume, pixel-centre aligned."""
    d, h, w = cost.shape
    H, W = size
    v = (np.arange(H) + 0.5) * h / H - 0.5
    u = (np.arange(W) + 0.5) * w / W - 0.5
    vv, uu = np.meshgrid(np.clip(v, 0, h - 1), np.clip(u, 0, w - 1), indexing="ij")
    idx, wts = interp_plan([vv, uu], (h, w))
    return apply_plan(cost, idx, wts)


def depth_probability(cost: CostVolume | Tensor) -> Tensor:
    c = cost.cost if isinstance(cost, CostVolume) else cost
    return T.softmax(-c, axis=0)


def soft_argmin(cost: CostVolume, candidates=None) -> Tensor:
    """Expected depth under softmax(-cost) over the candidate axis -> (H, W)."""
    if isinstance(cost, CostVolume):
        c, candidates = cost.cost, cost.candidates
    else:
        c = cost
    cands = np.asarray(candidates, dtype=np.float64)
    if c.shape[0] != len(cands):
        raise DimensionError(f"cost has {c.shape[0]} planes, {len(cands)} candidates")
    prob = T.softmax(-c, axis=0)
    weights = Tensor(np.broadcast_to(cands[:, None, None], c.shape).copy())
    return T.tsum(prob * weights, axis=0)


def depth_loss(pred: Tensor, gt: SparseDepthMap, z_range: tuple[float, float] | None = None, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over valid GT pixels (optionally restricted to ``z_range``)."""
    if pred.shape != gt.depth.shape:
        raise DimensionError(f"prediction {pred.shape} vs gt {gt.depth.shape}")
    if z_range is not None:
        gt = gt.in_range(z_range)
    if gt.count == 0:
        raise ContractError("no valid ground-truth depth pixels")
    flat = np.flatnonzero(gt.valid)
    picked = T.take(pred, flat)
    return T.smooth_l1(picked, gt.depth.reshape(-1)[flat], beta)


def occupancy_loss(prob: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of occupancy probabilities against a {0,1} grid."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != prob.shape:
        raise DimensionError(f"prob {prob.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("occupancy targets must be 0 or 1")
    p = T.clamp(prob, eps, 1 - eps)
    tt = Tensor(t)
    ll = tt * T.log(p) + (1.0 - tt) * T.log(1.0 - p)
    return -T.mean(ll)


def voxelize_points(points: np.ndarray, grid: VoxelGrid, threshold: int = 1) -> np.ndarray:
    """(D_V, H_V, W_V) {0,1} grid: a voxel is occupied iff >= threshold points fall inside."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo = np.array([grid.x_range[0], grid.y_range[0], grid.z_range[0]])
    idx = np.floor((pts - lo) / np.array(grid.voxel)).astype(np.int64)
    W, H, D = grid.dims
    ok = (idx[:, 0] >= 0) & (idx[:, 0] < W) & (idx[:, 1] >= 0) & (idx[:, 1] < H) & (idx[:, 2] >= 0) & (idx[:, 2] < D)
    idx = idx[ok]
    counts = np.zeros((D, H, W), dtype=np.int64)
    np.add.at(counts, (idx[:, 2], idx[:, 1], idx[:, 0]), 1)
    return (counts >= threshold).astype(np.float64)


# ---------------------------------------------------------------------------
# depth map export
# ---------------------------------------------------------------------------

DEPTH_FORMATS = ("mm16", "ten")


def depth_to_mm16(depth: np.ndarray) -> np.ndarray:
    """Metres -> uint16 millimetres; non-finite or non-positive depths become 0 (invalid)."""
    d = np.asarray(depth, dtype=np.float64)
    mm = np.where(np.isfinite(d) & (d > 0), np.rint(d * 1000.0), 0.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def export_depth(path, depth, fmt: str = "mm16") -> None:
    """Write a depth map either as a 16-bit binary PGM of integer millimetres or as a tensor dump."""
    d = depth.data if isinstance(depth, Tensor) else np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise DimensionError(f"depth map must be (H, W), got {d.shape}")
    if fmt == "ten":
        T.save(path, Tensor(d))
    elif fmt == "mm16":
        mm = depth_to_mm16(d)
        h, w = mm.shape
        Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + mm.astype(">u2").tobytes())
    else:
        raise ContractError(f"unknown depth format {fmt!r}; use one of {DEPTH_FORMATS}")


def read_depth_mm16(path) -> np.ndarray:
    """Read a map written by ``export_depth(fmt='mm16')`` back to metres (0 = invalid)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ContractError(f"{path}: not a 16-bit PGM depth map")
    w, h = (int(t) for t in parts[1].split())
    mm = np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w)
    return mm.astype(np.float64) / 1000.0
