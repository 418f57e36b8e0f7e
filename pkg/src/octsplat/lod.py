"""Per-view LOD selection.

The fractional LOD of an anchor at distance d is log2(d_max / d) plus the
anchor's learnable bias, clamped to [0, K-1]. Training uses a hard mask
(level <= round(L*)); inference includes level <= ceil(L*) and multiplies
transition-level child opacities by frac(L*) so renders stay continuous in
camera distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, OctreeScene, SceneError, round_half_away


@dataclass
class LodQuery:
    """Per-anchor selection state for one view."""

    distances: np.ndarray  # (M,) footprint-scaled camera-to-anchor distances
    lstar: np.ndarray  # (M,) biased fractional LOD after clamping
    lhat: np.ndarray  # (M,) round(L*), the integer LOD per anchor
    include: np.ndarray  # (M,) bool selection mask
    weight: np.ndarray  # (M,) blend weight, zero outside the mask
    num_levels: int
    lstar_raw: np.ndarray | None = None  # (M,) biased fractional LOD before clamping


def fractional_lod(d: float, scene: OctreeScene) -> float:
    """Unclamped fractional LOD log2(d_max_hat / d); callers clamp."""
    if d <= 0:
        raise SceneError("distance must be positive")
    return float(np.log2(scene.d_max_hat / d))


def select(scene: OctreeScene, camera: Camera, train_mode: bool, *,
           blend_transition: bool = False, max_level: int | None = None,
           lod_override: int | None = None, frustum_cull: bool = False) -> LodQuery:
    """Compute the per-anchor include mask and blend weights for one view.

    `blend_transition` is the straight-through training variant: the mask
    stays hard but anchors at the transition level ceil(L*) keep the
    fractional weight, which is what lets lod_bias receive gradient.
    `max_level` caps selection during progressive training; `lod_override`
    forces a fixed integer LOD (used by the render service);
    `frustum_cull` applies the optional off-screen post-filter.
    """
    k_levels = scene.num_levels
    m = scene.anchor_count
    if m == 0:
        z = np.zeros(0)
        return LodQuery(z, z, z.astype(np.int64), z.astype(bool), z, k_levels, z)
    d = np.linalg.norm(scene.voxel_centers - camera.position, axis=1)
    d = np.maximum(d * camera.footprint_scale, 1e-12)
    raw = np.log2(scene.d_max_hat / d) + scene.lod_bias
    lstar = np.clip(raw, 0.0, k_levels - 1)
    lhat = round_half_away(lstar).astype(np.int64)
    levels = scene.levels.astype(np.int64)
    floor_l = np.floor(lstar)
    frac = lstar - floor_l

    if lod_override is not None:
        include = levels <= int(lod_override)
        weight = include.astype(np.float64)
    elif train_mode:
        include = levels <= lhat
        if blend_transition:
            weight = np.where(levels <= floor_l, 1.0, frac)
        else:
            weight = np.ones(m)
        weight = weight * include
    else:
        include = levels <= np.ceil(lstar)
        weight = np.where(levels <= floor_l, 1.0, frac) * include

    if max_level is not None:
        include = include & (levels <= int(max_level))
    if frustum_cull:
        include = frustum_filter(scene, camera, include)
    weight = weight * include
    return LodQuery(d, lstar, lhat, include, weight, k_levels, raw)


def frustum_filter(scene: OctreeScene, camera: Camera,
                   include: np.ndarray) -> np.ndarray:
    """Optional view-frustum post-filter over an inclusion mask.

    Purely an optimization, not a correctness contract: an anchor is
    dropped only when a sphere of two voxel widths around its center lies
    entirely behind the camera or entirely off-screen, which is
    conservative for children that stay near their voxel.
    """
    if scene.anchor_count == 0:
        return include
    xc = camera.world_to_cam(scene.voxel_centers)
    bound = 2.0 * np.asarray(scene.voxel_size(scene.levels.astype(np.float64)))
    z = xc[:, 2]
    behind = z + bound <= 0.0
    safe = z - bound > 1e-6
    z_near = np.where(safe, z - bound, 1.0)
    rpx = max(camera.fx, camera.fy) * bound / z_near
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * xc[:, 0] / z + camera.cx
        py = camera.fy * xc[:, 1] / z + camera.cy
    outside = safe & ((px + rpx < 0) | (px - rpx > camera.width - 1)
                      | (py + rpx < 0) | (py - rpx > camera.height - 1))
    return include & ~behind & ~outside


def selected_primitive_count(query: LodQuery, scene: OctreeScene) -> int:
    """The per-view "#GS" statistic: children per anchor times included anchors."""
    return scene.children_per_anchor * int(np.sum(query.include))


def counts_per_level(query: LodQuery, scene: OctreeScene) -> list[int]:
    return [int(np.sum(query.include & (scene.levels == l)))
            for l in range(scene.num_levels)]
