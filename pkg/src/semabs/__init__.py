"""Semantic box abstraction of voxelized 3D shapes.

Templates of likely part boxes are learned per category, placed and shrunk
onto a new shape, scored and refined by a small head over pooled voxel
features, and fused into one labeled box per part instance.  The result
drives instance-level mesh segmentation and abstraction-level matching.
"""

from .geometry import Aabb, OrientedBox, VoxelGrid, aabb_iou, obb_iou, obb_to_aabb, voxelize_parts
from .pipeline import PipelineConfig, run_experiment

__all__ = [
    "Aabb",
    "OrientedBox",
    "VoxelGrid",
    "aabb_iou",
    "obb_iou",
    "obb_to_aabb",
    "voxelize_parts",
    "PipelineConfig",
    "run_experiment",
]
__version__ = "0.1.0"
