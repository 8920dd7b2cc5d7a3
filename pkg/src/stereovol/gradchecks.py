"""Named finite-difference gradient checks over the differentiable operations.

Each check builds a small random instance from a fixed seed and returns the
max relative error reported by :func:`stereovol.tensor.grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .boxes import Box3D, boxes_to_array
from .camera import Intrinsics, StereoRig
from .depth import CostVolume, SparseDepthMap, depth_loss, occupancy_loss, soft_argmin
from .detection import (
    assign_targets, centerness_loss, decode_tensor, focal_loss, generate_anchors, regression_loss,
)
from .tensor import Tensor, grad_check
from .volumes import VoxelGrid, depth_candidates, lift_image_to_3dv, warp_psv_to_3dgv

EPS = 1e-5
TOLERANCE = 1e-4
COMPOSED_TOLERANCE = 1e-3


def tiny_grid() -> VoxelGrid:
    """8 x 4 x 8 voxels (W, H, D)."""
    return VoxelGrid((-1.6, 1.6), (-0.4, 1.2), (2.0, 5.2), (0.4, 0.4, 0.4))


def tiny_rig() -> StereoRig:
    """Camera for a 16 x 8 (W x H) image that sees the tiny grid."""
    return StereoRig(Intrinsics(8.0, 8.0, 7.5, 3.5), 0.5)


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def _detection_case(rng):
    grid = tiny_grid()
    anchors = generate_anchors(grid, "Car")
    gt = boxes_to_array([Box3D(0.1, 0.8, 3.7, 1.5, 1.6, 3.8, 0.3)])
    assign = assign_targets(anchors, gt, 1.0, grid)
    return anchors, gt, assign


def check_soft_argmin(rng) -> float:
    cands = np.linspace(2.0, 5.0, 6)
    w = _weights(rng, (3, 4))
    return grad_check(lambda c: T.tsum(soft_argmin(CostVolume(c, cands)) * w), rng.normal(size=(6, 3, 4)), EPS)


def check_warp(rng) -> float:
    grid, k = tiny_grid(), tiny_rig().intrinsics
    n_d = grid.dims[2]
    w = _weights(rng, (2,) + grid.shape_zyx)
    return grid_fn_check(rng, lambda v: T.tsum(warp_psv_to_3dgv(v, grid, k, candidates=depth_candidates(grid)).feature * w),
                         (2, n_d, 8, 16))


def check_lift(rng) -> float:
    grid, k = tiny_grid(), tiny_rig().intrinsics
    w = _weights(rng, (3,) + grid.shape_zyx)
    return grid_fn_check(rng, lambda f: T.tsum(lift_image_to_3dv(f, grid, k, x_offset=0.5).feature * w), (3, 8, 16))


def grid_fn_check(rng, fn, shape) -> float:
    return grad_check(fn, rng.normal(size=shape), EPS)


def check_decode_box(rng) -> float:
    anchors, _, _ = _detection_case(rng)
    a = anchors.boxes[:5]
    w = [_weights(rng, (5,)) for _ in range(7)]

    def fn(d):
        parts = decode_tensor(a, d, anchors.n_theta)
        total = T.tsum(parts[0] * w[0])
        for p, wi in zip(parts[1:], w[1:]):
            total = total + T.tsum(p * wi)
        return total

    return grad_check(fn, rng.normal(scale=0.5, size=(5, 7)), EPS)


def check_depth_loss(rng) -> float:
    gt = SparseDepthMap(rng.uniform(2, 5, size=(4, 5)), rng.random((4, 5)) < 0.6)
    return grad_check(lambda p: depth_loss(p, gt), rng.uniform(2, 5, size=(4, 5)), EPS)


def check_occupancy_loss(rng) -> float:
    target = (rng.random((3, 4, 5)) < 0.3).astype(np.float64)
    return grad_check(lambda p: occupancy_loss(p, target), rng.uniform(0.05, 0.95, size=(3, 4, 5)), EPS)


def check_focal_loss(rng) -> float:
    labels = (rng.random(40) < 0.2).astype(np.int64)
    return grad_check(lambda x: focal_loss(x, labels), rng.normal(size=40), EPS)


def check_regression_separable(rng) -> float:
    anchors, gt, assign = _detection_case(rng)
    return grad_check(lambda d: regression_loss(anchors, d, assign, gt, "separable"),
                      rng.normal(scale=0.3, size=(len(anchors.boxes), 7)), EPS)


def check_regression_joint(rng) -> float:
    anchors, gt, assign = _detection_case(rng)
    return grad_check(lambda d: regression_loss(anchors, d, assign, gt, "joint_corners", corner_flip_min=True),
                      rng.normal(scale=0.3, size=(len(anchors.boxes), 7)), EPS)


def check_centerness_loss(rng) -> float:
    anchors, _, assign = _detection_case(rng)
    return grad_check(lambda x: centerness_loss(x, assign), rng.normal(size=len(anchors.boxes)), EPS)


def composed_case(construction_mode: str = "psv_3dgv", supervision: str = "depth", seed: int = 0):
    """A tiny config, network, random stereo sample and targets for end-to-end checks."""
    from .data import SceneSample
    from .pipeline import PipelineConfig, TinyNetwork, make_targets

    grid, rig = tiny_grid(), tiny_rig()
    k = rig.intrinsics
    cfg = PipelineConfig(
        x_range=grid.x_range, y_range=grid.y_range, z_range=grid.z_range, voxel=grid.voxel,
        image_size=(8, 16), fx=k.fx, fy=k.fy, cu=k.cu, cv=k.cv, baseline=rig.baseline,
        backbone_channels=(3, 3), psv_channels=(3,), tower_channels=3, bev_channels=4, bev_kernel=3, bev_layers=1,
        construction_mode=construction_mode, supervision=supervision, seed=seed,
    )
    rng = np.random.default_rng(seed + 101)
    depth = SparseDepthMap(rng.uniform(2.0, 5.2, size=(8, 16)), rng.random((8, 16)) < 0.5)
    box = Box3D(0.2, 0.8, 3.6, 1.5, 1.6, 3.8, 0.4)
    sample = SceneSample(rng.normal(size=(4, 8, 16)), rng.normal(size=(4, 8, 16)), depth, [box], rig, grid)
    net = TinyNetwork(cfg, 4)
    for p in net.parameters():  # heads start near zero; give them generic values
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    return cfg, net, sample, make_targets(sample, cfg)


def composed_loss_fn(cfg, net, sample, targets, param: str) -> Callable[[Tensor], Tensor]:
    from .pipeline import forward, total_loss

    def fn(t: Tensor) -> Tensor:
        saved = net.params[param]
        net.params[param] = t
        try:
            return total_loss(forward(net, sample, cfg), targets, cfg)[0]
        finally:
            net.params[param] = saved

    return fn


def check_composed(rng, construction_mode="psv_3dgv", supervision="depth", params=("backbone0_w", "psv0_w")) -> float:
    cfg, net, sample, targets = composed_case(construction_mode, supervision)
    errs = [grad_check(composed_loss_fn(cfg, net, sample, targets, name), net.params[name].data, EPS)
            for name in params]
    return max(errs)


@dataclass(frozen=True)
class Check:
    name: str
    fn: Callable[[np.random.Generator], float]
    tolerance: float = TOLERANCE


CHECKS = {
    c.name: c
    for c in (
        Check("soft_argmin", check_soft_argmin),
        Check("warp_psv_to_3dgv", check_warp),
        Check("lift_image_to_3dv", check_lift),
        Check("decode_box", check_decode_box),
        Check("depth_loss", check_depth_loss),
        Check("occupancy_loss", check_occupancy_loss),
        Check("focal_loss", check_focal_loss),
        Check("regression_separable", check_regression_separable),
        Check("regression_joint_corners", check_regression_joint),
        Check("centerness_loss", check_centerness_loss),
        Check("composed_psv", check_composed, COMPOSED_TOLERANCE),
        Check("composed_cv", lambda r: check_composed(r, "cv_3dgv", "depth"), COMPOSED_TOLERANCE),
        Check("composed_img",
              lambda r: check_composed(r, "img_3dv", "occupancy", ("backbone0_w", "occ_w")), COMPOSED_TOLERANCE),
    )
}


def run(names=None, seed: int = 0) -> list[tuple[str, float, bool]]:
    """Run the named checks (all by default); returns (name, error, passed) rows."""
    names = list(CHECKS) if names is None else list(names)
    out = []
    for n in names:
        if n not in CHECKS:
            raise KeyError(f"unknown gradient check {n!r}; known: {', '.join(CHECKS)}")
        c = CHECKS[n]
        err = c.fn(np.random.default_rng(seed))
        out.append((n, err, err < c.tolerance))
    return out
