"""Training-free multi-granularity segmentation from upsampled features.

The stack lifts coarse feature grids to pixel resolution through channel-
excited cross-attention, discovers prototype cues, assigns per-pixel labels
by a blended feature/attention cost, agglomerates segments into a scored
fine-to-coarse hierarchy, calibrates granularity against annotated targets,
and evaluates masks with Hungarian-matched mIoU and centerline IoU.
"""

from ease.tensors import (
    AttentionMap,
    FeatureMap,
    LabelMap,
    cosine_sim,
    l2_normalize,
    read_tensor,
    spatial_gradient,
    write_tensor,
)

__all__ = [
    "AttentionMap",
    "FeatureMap",
    "LabelMap",
    "cosine_sim",
    "l2_normalize",
    "read_tensor",
    "spatial_gradient",
    "write_tensor",
]

__version__ = "0.1.0"
