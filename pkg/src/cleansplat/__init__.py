"""Distractor-robust Gaussian splatting with explicit scene decomposition."""

from .cameras import Camera, look_at_camera
from .compositing import (
    CompositeOutput,
    SceneModel,
    composite_backward,
    distractor_mask,
    init_distractors,
    render_decomposed,
    render_static_only,
)
from .gaussians import GaussianSet, build_covariance, quat_to_rotation
from .losses import LossWeights, dssim_loss, l1_loss, ssim, total_loss
from .projection import eval_alpha, project_set
from .rasterizer import RenderOutput, bin_tiles, render_backward, render_forward
from .sh import eval_sh_colors, sh_basis

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "CompositeOutput",
    "GaussianSet",
    "LossWeights",
    "RenderOutput",
    "SceneModel",
    "bin_tiles",
    "build_covariance",
    "composite_backward",
    "distractor_mask",
    "dssim_loss",
    "eval_alpha",
    "eval_sh_colors",
    "init_distractors",
    "l1_loss",
    "look_at_camera",
    "project_set",
    "quat_to_rotation",
    "render_backward",
    "render_decomposed",
    "render_forward",
    "render_static_only",
    "sh_basis",
    "ssim",
    "total_loss",
]
