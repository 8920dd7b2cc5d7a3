"""Differentiable stereo volumes and 3D detection at desk scale."""

from .tensor import Tensor, ContractError, DimensionError, backward, grad_check
from .camera import Intrinsics, StereoRig
from .volumes import VoxelGrid, depth_candidates
from .boxes import Box3D

__all__ = [
    "Tensor", "ContractError", "DimensionError", "backward", "grad_check",
    "Intrinsics", "StereoRig", "VoxelGrid", "depth_candidates", "Box3D",
]
