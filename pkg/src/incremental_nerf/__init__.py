"""Incremental radiance-field training over sequentially arriving image chunks."""

from .alignment import TransferTransform, apply_transfer, compute_transfer
from .geometry import CameraPose, Intrinsics, PoseDelta, rodrigues
from .pose_graph import PoseGraph, SelectionConfig, brute_force_select, greedy_select
from .radiance import VoxelRadianceField, render_image, render_ray_with_grad
from .training import TrainConfig, incremental_fit

__all__ = [
    "CameraPose", "Intrinsics", "PoseDelta", "PoseGraph", "SelectionConfig", "TrainConfig",
    "TransferTransform", "VoxelRadianceField", "apply_transfer", "brute_force_select",
    "compute_transfer", "greedy_select", "incremental_fit", "render_image",
    "render_ray_with_grad", "rodrigues",
]

__version__ = "0.1.0"
