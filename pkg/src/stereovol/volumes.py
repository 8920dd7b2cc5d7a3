"""Frustum-space and world-space feature volumes.

Layouts: image features are (C, H, W); plane-sweep volumes are (C, D, H, W)
with D the depth-candidate axis; geometric volumes are (C, D_V, H_V, W_V) with
axes ordered (z, y, x).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .camera import Intrinsics, StereoRig
from .tensor import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class VoxelGrid:
    x_range: tuple[float, float] = (-30.4, 30.4)
    y_range: tuple[float, float] = (-1.0, 3.0)
    z_range: tuple[float, float] = (2.0, 40.4)
    voxel: tuple[float, float, float] = (0.2, 0.2, 0.2)
    dims: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        dims = []
        for (lo, hi), v, name in zip((self.x_range, self.y_range, self.z_range), self.voxel, "xyz"):
            if v <= 0 or hi <= lo:
                raise ValueError(f"invalid {name} range {lo, hi} / voxel {v}")
            n = (hi - lo) / v
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"{name} extent {hi - lo} is not a multiple of voxel size {v}")
            dims.append(int(round(n)))
        object.__setattr__(self, "dims", tuple(dims))

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        w, h, d = self.dims
        return d, h, w

    def centers(self, axis: str) -> np.ndarray:
        i = "xyz".index(axis)
        lo = (self.x_range, self.y_range, self.z_range)[i][0]
        v = self.voxel[i]
        return lo + (np.arange(self.dims[i]) + 0.5) * v

    def voxel_centers(self) -> np.ndarray:
        """(D_V, H_V, W_V, 3) array of (x, y, z) voxel centres."""
        z, y, x = np.meshgrid(self.centers("z"), self.centers("y"), self.centers("x"), indexing="ij")
        return np.stack([x, y, z], axis=-1)

    def bev_centers(self) -> np.ndarray:
        """(D_V, W_V, 2) array of (x, z) BEV cell centres."""
        z, x = np.meshgrid(self.centers("z"), self.centers("x"), indexing="ij")
        return np.stack([x, z], axis=-1)

    def to_text(self) -> str:
        return (
            f"x_range: {self.x_range[0]!r} {self.x_range[1]!r}\n"
            f"y_range: {self.y_range[0]!r} {self.y_range[1]!r}\n"
            f"z_range: {self.z_range[0]!r} {self.z_range[1]!r}\n"
            f"voxel: {self.voxel[0]!r} {self.voxel[1]!r} {self.voxel[2]!r}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "VoxelGrid":
        vals = {}
        for line in text.splitlines():
            if ":" in line:
                k, v = line.split(":", 1)
                vals[k.strip()] = tuple(float(t) for t in v.split())
        return cls(vals["x_range"], vals["y_range"], vals["z_range"], vals["voxel"])


def depth_candidates(grid: VoxelGrid) -> np.ndarray:
    """Depth planes at z-cell centres: z_min + (i + 0.5) * v_d."""
    return grid.centers("z")


@dataclass
class PlaneSweepVolume:
    feature: Tensor
    depth_candidates: np.ndarray
    stride: int
    rig: StereoRig


@dataclass
class GeometricVolume:
    feature: Tensor
    grid: VoxelGrid


# ---------------------------------------------------------------------------
# interpolation plans
# ---------------------------------------------------------------------------


def axis_weights(coord: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Two-tap linear weights along one axis of length ``n``.

    Neighbours outside [0, n-1] get weight 0; if the nearest sample itself is
    outside, both weights are 0.
    """
    c = np.asarray(coord, dtype=np.float64)
    i0 = np.floor(c)
    f = c - i0
    i0 = i0.astype(np.int64)
    idx = np.stack([i0, i0 + 1], axis=-1)
    w = np.stack([1.0 - f, f], axis=-1)
    nearest = np.floor(c + 0.5)
    ok_near = (nearest >= 0) & (nearest <= n - 1) & np.isfinite(c)
    inside = (idx >= 0) & (idx <= n - 1)
    w = np.where(inside & ok_near[..., None], w, 0.0)
    idx = np.where(inside, idx, 0)
    return idx, w


def interp_plan(coords: list[np.ndarray], sizes: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear gather plan over len(sizes) axes (row-major flat indices).

    ``coords[a]`` holds fractional positions along axis ``a``; all share one
    shape S.  Returns index/weight arrays of shape S + (2**len(sizes),).
    """
    per_axis = [axis_weights(c, n) for c, n in zip(coords, sizes)]
    strides = np.cumprod((1,) + tuple(sizes[::-1]))[:-1][::-1]
    shape = np.broadcast(*coords).shape
    idx = np.zeros(shape + (1,), dtype=np.int64)
    w = np.ones(shape + (1,))
    for (ia, wa), st in zip(per_axis, strides):
        idx = (idx[..., :, None] + st * ia[..., None, :]).reshape(shape + (-1,))
        w = (w[..., :, None] * wa[..., None, :]).reshape(shape + (-1,))
    return idx, w


def apply_plan(feature: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """Gather every channel of ``feature`` (C, *S_in) with one spatial plan -> (C, *S_out)."""
    c = feature.shape[0]
    spatial = int(np.prod(feature.shape[1:]))
    offs = (np.arange(c) * spatial).reshape((c,) + (1,) * idx.ndim)
    full_idx = idx[None] + offs
    full_w = np.broadcast_to(w[None], full_idx.shape)
    return T.gather_weighted(feature, full_idx, full_w)


# ---------------------------------------------------------------------------
# frustum-space volumes
# ---------------------------------------------------------------------------


def _check_pair(left: Tensor, right: Tensor) -> None:
    if left.ndim != 3 or left.shape != right.shape:
        raise DimensionError(f"left/right feature maps must share a (C, H, W) shape, got {left.shape} vs {right.shape}")


def psv_plan(shape_chw: tuple[int, int, int], rig: StereoRig, candidates: np.ndarray, stride: int):
    _, h, w = shape_chw
    shifts = rig.fx * rig.baseline / (np.asarray(candidates) * stride)
    u = np.arange(w, dtype=np.float64)
    src = u[None, :] - shifts[:, None]  # (D, W)
    idx, wts = axis_weights(src, w)
    d = len(candidates)
    rows = np.arange(h)[None, :, None, None] * w
    full_idx = np.broadcast_to(idx[:, None, :, :] + rows, (d, h, w, 2))
    full_w = np.broadcast_to(wts[:, None, :, :], (d, h, w, 2))
    return full_idx, full_w


def build_psv(left: Tensor, right: Tensor, rig: StereoRig, grid: VoxelGrid, stride: int = 1, plan=None) -> PlaneSweepVolume:
    """Concatenate left features with right features reprojected at each depth plane."""
    _check_pair(left, right)
    cands = depth_candidates(grid)
    c0, h, w = left.shape
    if plan is None:
        plan = psv_plan(left.shape, rig, cands, stride)
    idx, wts = plan
    right_r = apply_plan(right, idx, wts)
    left_r = T.repeat(T.reshape(left, (c0, 1, h, w)), len(cands), axis=1)
    return PlaneSweepVolume(T.concat([left_r, right_r], axis=0), cands, stride, rig)


def build_disparity_cost_volume(left: Tensor, right: Tensor, max_disp: int) -> Tensor:
    """Concatenation volume over integer disparities 0..max_disp-1."""
    _check_pair(left, right)
    c0, h, w = left.shape
    if max_disp < 1 or max_disp >= w:
        raise DimensionError(f"max_disp must be in [1, W-1], got {max_disp} for W={w}")
    u = np.arange(w)
    src = u[None, :] - np.arange(max_disp)[:, None]  # (D, W)
    valid = src >= 0
    idx = np.where(valid, src, 0)[:, None, :] + (np.arange(h) * w)[None, :, None]
    wts = np.broadcast_to(valid[:, None, :].astype(np.float64), idx.shape)
    right_r = apply_plan(right, idx[..., None], wts[..., None])
    left_r = T.repeat(T.reshape(left, (c0, 1, h, w)), max_disp, axis=1)
    return T.concat([left_r, right_r], axis=0)


# ---------------------------------------------------------------------------
# world-space volumes
# ---------------------------------------------------------------------------


def _voxel_image_coords(grid: VoxelGrid, k: Intrinsics, stride: int, x_offset: float = 0.0):
    pts = grid.voxel_centers()
    x, y, z = pts[..., 0] - x_offset, pts[..., 1], pts[..., 2]
    u = (k.fx * x / z + k.cu) / stride
    v = (k.fy * y / z + k.cv) / stride
    return u, v, z


def warp_plan(grid: VoxelGrid, k: Intrinsics, psv_shape: tuple[int, ...], candidates: np.ndarray, stride: int):
    """Trilinear plan mapping voxel centres to (candidate, v, u) PSV coordinates."""
    _, d, h, w = psv_shape
    cands = np.asarray(candidates, dtype=np.float64)
    if len(cands) != d:
        raise DimensionError(f"PSV has {d} planes but {len(cands)} candidates given")
    u, v, z = _voxel_image_coords(grid, k, stride)
    step = cands[1] - cands[0] if d > 1 else 1.0
    di = (z - cands[0]) / step
    return interp_plan([di, v, u], (d, h, w))


def cv_warp_plan(grid: VoxelGrid, rig: StereoRig, cv_shape: tuple[int, ...], stride: int):
    """Trilinear plan mapping voxel centres to (integer-disparity index, v, u) coordinates."""
    _, d, h, w = cv_shape
    u, v, z = _voxel_image_coords(grid, rig.intrinsics, stride)
    disp = rig.fx * rig.baseline / (z * stride)
    return interp_plan([disp, v, u], (d, h, w))


def warp_psv_to_3dgv(psv: PlaneSweepVolume | Tensor, grid: VoxelGrid, k: Intrinsics, plan=None,
                     candidates=None, stride: int | None = None) -> GeometricVolume:
    """Resample a frustum-space volume at every voxel centre (trilinear, zero outside the image)."""
    if isinstance(psv, PlaneSweepVolume):
        feat, candidates, stride = psv.feature, psv.depth_candidates, psv.stride
    else:
        feat = psv
        candidates = depth_candidates(grid) if candidates is None else candidates
        stride = 1 if stride is None else stride
    if feat.ndim != 4:
        raise DimensionError(f"expected a (C, D, H, W) volume, got {feat.shape}")
    if plan is None:
        plan = warp_plan(grid, k, feat.shape, candidates, stride)
    return GeometricVolume(apply_plan(feat, *plan), grid)


def warp_cv_to_3dgv(cv: Tensor, grid: VoxelGrid, rig: StereoRig, stride: int = 1, plan=None) -> GeometricVolume:
    if plan is None:
        plan = cv_warp_plan(grid, rig, cv.shape, stride)
    return GeometricVolume(apply_plan(cv, *plan), grid)


def lift_plan(grid: VoxelGrid, k: Intrinsics, feat_shape: tuple[int, ...], stride: int = 1, x_offset: float = 0.0):
    _, h, w = feat_shape
    u, v, _ = _voxel_image_coords(grid, k, stride, x_offset)
    return interp_plan([v, u], (h, w))


def lift_image_to_3dv(feat: Tensor, grid: VoxelGrid, k: Intrinsics, stride: int = 1, x_offset: float = 0.0,
                      plan=None) -> GeometricVolume:
    """Bilinearly sample a 2D feature map at each voxel's projection.

    ``x_offset`` places the camera at (x_offset, 0, 0), e.g. the baseline for
    the right view of a rectified pair.
    """
    if feat.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) feature map, got {feat.shape}")
    if plan is None:
        plan = lift_plan(grid, k, feat.shape, stride, x_offset)
    return GeometricVolume(apply_plan(feat, *plan), grid)


VOXEL_MODES = ("occupancy", "probability", "last_features")


def voxel_feature_mode(cost: Tensor, mode: str, features: Tensor | None = None) -> Tensor:
    """Encode a frustum cost volume for warping.

    cost is (D, H, W) or (1, D, H, W).  Returns a (C, D, H, W) tensor: a hard
    one-hot at the per-ray minimum cost (detached), the depth softmax of -cost,
    or ``features`` unchanged.
    """
    if mode not in VOXEL_MODES:
        raise ContractError(f"unknown voxel feature mode {mode!r}")
    if mode == "last_features":
        if features is None:
            raise ContractError("last_features mode needs the feature volume")
        return features
    c = cost if cost.ndim == 4 else T.reshape(cost, (1,) + cost.shape)
    if c.shape[0] != 1:
        raise DimensionError(f"{mode} mode needs a 1-channel cost, got {cost.shape}")
    if mode == "probability":
        return T.softmax(-c, axis=1)
    # argmin picks the first (nearest-plane) index on ties
    best = np.argmin(c.data[0], axis=0)
    onehot = (np.arange(c.shape[1])[:, None, None] == best[None]).astype(np.float64)
    return Tensor(onehot[None])


def attention_concat(gv: GeometricVolume, image_feat: Tensor, prob, k: Intrinsics, stride: int = 1,
                     plan=None) -> GeometricVolume:
    """Append image features lifted to the grid and weighted by per-voxel depth probability."""
    p = prob.feature if isinstance(prob, GeometricVolume) else prob
    if isinstance(prob, GeometricVolume) and prob.grid != gv.grid:
        raise DimensionError("probability volume lives on a different grid")
    target = (1,) + gv.feature.shape[1:]
    if p.shape != target:
        raise DimensionError(f"probability volume shape {p.shape}, expected {target}")
    lifted = lift_image_to_3dv(image_feat, gv.grid, k, stride, plan=plan).feature
    weighted = lifted * T.repeat(p, lifted.shape[0], axis=0)
    return GeometricVolume(T.concat([gv.feature, weighted], axis=0), gv.grid)


def save_volume(prefix, volume) -> None:
    """Write ``<prefix>.ten`` (tensor dump) and ``<prefix>.grid`` (text sidecar)."""
    prefix = Path(prefix)
    feat = volume.feature if hasattr(volume, "feature") else volume
    T.save(prefix.with_suffix(".ten"), feat)
    if isinstance(volume, GeometricVolume):
        prefix.with_suffix(".grid").write_text(volume.grid.to_text())
    elif isinstance(volume, PlaneSweepVolume):
        cands = " ".join(repr(float(c)) for c in volume.depth_candidates)
        prefix.with_suffix(".grid").write_text(f"stride: {volume.stride}\ndepth_candidates: {cands}\n")


def load_geometric_volume(prefix) -> GeometricVolume:
    prefix = Path(prefix)
    return GeometricVolume(T.load(prefix.with_suffix(".ten")), VoxelGrid.from_text(prefix.with_suffix(".grid").read_text()))
