"""octsplat: level-of-detail Gaussian splatting at desk scale."""

from .scene import (Anchor, Camera, GaussianPrimitive, GrowthStats,
                    OctreeScene, SceneError, covariance_of, eval_gaussian,
                    look_at_camera, round_half_away)
from .builder import BuildConfig, base_voxel_size, build, depth_range, level_count
from .lod import LodQuery, fractional_lod, select, selected_primitive_count
from .rasterizer import (Framebuffer, RenderStats, Splat2D, project,
                         render_reference, render_tiled, render_view)
from .gradients import (LossConfig, ParamGrads, backward,
                        finite_difference_oracle, training_loss)
from .trainer import (TrainConfig, anchor_control, progressive_schedule,
                      train, volume_regularizer)
from .metrics import psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "Anchor", "Camera", "GaussianPrimitive", "GrowthStats", "OctreeScene",
    "SceneError", "covariance_of", "eval_gaussian", "look_at_camera",
    "round_half_away", "BuildConfig", "base_voxel_size", "build",
    "depth_range", "level_count", "LodQuery", "fractional_lod", "select",
    "selected_primitive_count", "Framebuffer", "RenderStats", "Splat2D",
    "project", "render_reference", "render_tiled", "render_view",
    "LossConfig", "ParamGrads", "backward", "finite_difference_oracle",
    "training_loss", "TrainConfig", "anchor_control",
    "progressive_schedule", "train", "volume_regularizer", "psnr", "ssim",
]
