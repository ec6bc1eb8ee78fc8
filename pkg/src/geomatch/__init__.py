"""Semi-supervised geometric matching: two-stage affine/TPS regression trained with keypoint and cycle losses."""

__version__ = "0.1.0"

from .geometry import CompositeTransform, composite_apply, make_grid, warp_image  # noqa: E402
from .matchnet import ModelConfig, ModelParams, estimate_transform, init_params  # noqa: E402

__all__ = [
    "CompositeTransform",
    "ModelConfig",
    "ModelParams",
    "composite_apply",
    "estimate_transform",
    "init_params",
    "make_grid",
    "warp_image",
]
