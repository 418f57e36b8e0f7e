"""Octree construction from a sparse point cloud and the training cameras.

The depth range of the camera/point distance distribution fixes the number
of levels; every point is then quantized onto each level's lattice and each
occupied voxel becomes one anchor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .scene import Camera, OctreeScene, SceneError, round_half_away


@dataclass
class BuildConfig:
    quantile_lo: float = 0.05
    quantile_hi: float = 0.95
    coarse_divisor: int = 4
    max_levels: int | None = None
    children_per_anchor: int = 4

    def validate(self) -> None:
        if not (0.0 <= self.quantile_lo < self.quantile_hi <= 1.0):
            raise SceneError("require 0 <= quantile_lo < quantile_hi <= 1")
        if self.coarse_divisor < 1:
            raise SceneError("coarse_divisor must be a positive integer")
        if self.children_per_anchor < 1:
            raise SceneError("children_per_anchor must be >= 1")


def quantize(points: np.ndarray, voxel: float) -> np.ndarray:
    """Integer lattice coordinates round(p / voxel), halves away from zero."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return round_half_away(pts / voxel).astype(np.int64)


def quantize_centers(points: np.ndarray, voxel: float) -> np.ndarray:
    """Voxel-center positions round(p / voxel) * voxel."""
    return quantize(points, voxel).astype(np.float64) * voxel


def depth_range(points, cameras: list[Camera], cfg: BuildConfig | None = None) -> tuple[float, float]:
    """Quantile bounds of all footprint-scaled camera-to-point distances."""
    cfg = cfg or BuildConfig()
    cfg.validate()
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0 or len(cameras) == 0:
        raise SceneError("empty scene")
    dists = []
    for cam in cameras:
        d = np.linalg.norm(pts - cam.position, axis=1) * cam.footprint_scale
        dists.append(d)
    all_d = np.concatenate(dists)
    d_min = float(np.quantile(all_d, cfg.quantile_lo, method="linear"))
    d_max = float(np.quantile(all_d, cfg.quantile_hi, method="linear"))
    if d_min <= 0.0:
        raise SceneError("degenerate depth range")
    return d_min, d_max


def level_count(d_min_hat: float, d_max_hat: float, max_levels: int | None = None) -> int:
    """Number of octree layers round(log2(d_max/d_min)) + 1, clamped."""
    if d_min_hat <= 0 or d_max_hat <= 0:
        raise SceneError("depth bounds must be positive")
    if d_max_hat < d_min_hat:
        raise SceneError("d_max_hat must be >= d_min_hat")
    k = int(round_half_away(np.log2(d_max_hat / d_min_hat))) + 1
    k = max(k, 1)
    if max_levels is not None:
        k = min(k, int(max_levels))
    return k


def base_voxel_size(points, cfg: BuildConfig | None = None) -> float:
    """Longest bounding-box axis divided by the coarse divisor."""
    cfg = cfg or BuildConfig()
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0:
        raise SceneError("empty point cloud")
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    if extent <= 0.0:
        warnings.warn("zero-extent point cloud; falling back to voxel size 1.0")
        return 1.0
    return extent / cfg.coarse_divisor


def build(points, cameras: list[Camera], cfg: BuildConfig | None = None) -> OctreeScene:
    """Build the LOD-labeled anchor octree.

    Every point is quantized to its voxel at every level; each distinct
    occupied voxel yields exactly one anchor. Children start at the voxel
    center (zero offsets) with scale eps_l/2, opacity 0.1 and mid gray.
    """
    cfg = cfg or BuildConfig()
    cfg.validate()
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0 or len(cameras) == 0:
        raise SceneError("empty scene")
    d_min, d_max = depth_range(pts, cameras, cfg)
    k_levels = level_count(d_min, d_max, cfg.max_levels)
    eps = base_voxel_size(pts, cfg)
    scene = OctreeScene(eps, k_levels, d_min, d_max, cfg.children_per_anchor)
    for level in range(k_levels):
        coords = quantize(pts, scene.voxel_size(level))
        for lattice in np.unique(coords, axis=0):
            scene.add_anchor(level, lattice)
    scene.validate()
    return scene
