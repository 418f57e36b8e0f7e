"""Shared scene factories for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from octsplat.scene import OctreeScene, look_at_camera, quat_normalize
from octsplat.rasterizer import render_view


def build_gradcheck_scene(seed: int):
    """A smooth-regime scene for finite-difference validation.

    Splats are broad enough that neither the alpha cutoff nor the bounding
    square falls inside the frame, the target keeps a margin from the
    render so the L1 sign field is locally constant, and the level-2
    anchor sits on the blending transition band so lod_bias gets gradient.
    FD probes at h=1e-4 therefore never straddle a forward discontinuity.
    """
    rng = np.random.default_rng(seed)
    k = 4
    scene = OctreeScene(epsilon=2.0, num_levels=3, d_min_hat=0.5, d_max_hat=1.0,
                        children_per_anchor=k)
    for lvl in range(3):
        scene.add_anchor(lvl, (0, 0, 0),
                         offsets=rng.uniform(-0.35, 0.35, (k, 3)),
                         scales=rng.uniform(1.25, 1.9, (k, 3)),
                         rotations=quat_normalize(rng.normal(size=(k, 4))),
                         opacities=rng.uniform(0.3, 0.5, k),
                         colors=rng.uniform(0.1, 0.9, (k, 3)))
    scene.lod_bias = rng.uniform(-0.12, 0.12, scene.anchor_count)
    dist = rng.uniform(3.0, 3.4)
    eye = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), -dist])
    cam = look_at_camera(eye=eye, target=[0, 0, 0], fx=40, width=32, height=32)
    scene.d_max_hat = float(np.linalg.norm(eye)) * 2**1.72
    fb, _ = render_view(scene, cam, mode="train")
    amp = rng.uniform(0.05, 0.3, fb.color.shape)
    target = np.clip(fb.color + np.where(fb.color < 0.5, amp, -amp), 0.0, 1.0)
    return scene, cam, target


def build_toy_gt_scene(rng: np.random.Generator) -> OctreeScene:
    """Ground truth for the refit task: 4 anchors, 16 children, K=2.

    d_max_hat is far beyond the camera orbit so L* clamps to K-1 and
    every level stays selected at weight 1 throughout training.
    """
    k = 4
    scene = OctreeScene(epsilon=1.0, num_levels=2, d_min_hat=1.0, d_max_hat=10.0,
                        children_per_anchor=k)
    lattices = {0: [(0, 0, 0)], 1: [(0, 0, 0), (1, 0, 0), (0, 1, 0)]}
    for lvl, lats in lattices.items():
        for lat in lats:
            scene.add_anchor(lvl, lat,
                             offsets=rng.uniform(-0.3, 0.3, (k, 3)),
                             scales=rng.uniform(0.08, 0.2, (k, 3)),
                             rotations=quat_normalize(rng.normal(size=(k, 4))),
                             opacities=rng.uniform(0.5, 0.9, k),
                             colors=rng.uniform(0.15, 0.95, (k, 3)))
    return scene


def orbit_cameras(center, n: int, radius: float = 2.5, res: int = 64, fx: float = 70.0):
    cams = []
    for i in range(n):
        th = 2 * np.pi * i / n
        ph = 0.5 + 0.6 * np.sin(3.1 * i)
        eye = center + radius * np.array([np.cos(th) * np.cos(ph),
                                          np.sin(ph),
                                          np.sin(th) * np.cos(ph)])
        cams.append(look_at_camera(eye, center, fx=fx, width=res, height=res))
    return cams


def perturb_scene(scene: OctreeScene, rng: np.random.Generator) -> OctreeScene:
    out = scene.copy()
    out.offsets = (out.offsets.astype(np.float64)
                   + rng.normal(0, 0.05, out.offsets.shape)).astype(np.float32)
    out.scales = (out.scales.astype(np.float64)
                  * np.exp(rng.normal(0, 0.25, out.scales.shape))).astype(np.float32)
    out.opacities = np.clip(out.opacities.astype(np.float64)
                            + rng.normal(0, 0.15, out.opacities.shape), 0.05, 1.0).astype(np.float32)
    out.colors = np.clip(out.colors.astype(np.float64)
                         + rng.normal(0, 0.15, out.colors.shape), 0.0, 1.0).astype(np.float32)
    q = out.rotations.astype(np.float64) + rng.normal(0, 0.1, out.rotations.shape)
    out.rotations = (q / np.linalg.norm(q, axis=-1, keepdims=True)).astype(np.float32)
    return out


def build_nested_scene(levels: int = 4, k: int = 4) -> OctreeScene:
    """Levels populated 1, 8, 64, 512: the synthetic zoom-out testbed."""
    scene = OctreeScene(epsilon=1.0, num_levels=levels, d_min_hat=100.0,
                        d_max_hat=1000.0, children_per_anchor=k)
    rng = np.random.default_rng(11)
    for lvl in range(levels):
        eps = scene.voxel_size(lvl)
        n = 2**lvl
        for ix in range(n):
            for iy in range(n):
                for iz in range(n):
                    scene.add_anchor(lvl, (ix, iy, iz),
                                     scales=np.full((k, 3), eps * 0.4),
                                     opacities=np.full(k, 0.8),
                                     colors=rng.uniform(0.3, 1.0, (k, 3)))
    return scene


def build_continuity_scene() -> OctreeScene:
    """Three levels stacked in one voxel column with distinct brightness."""
    k = 4
    scene = OctreeScene(epsilon=2.0, num_levels=3, d_min_hat=1.0, d_max_hat=8.0,
                        children_per_anchor=k)
    rng = np.random.default_rng(5)
    palette = [0.25, 0.55, 0.95]
    for lvl in range(3):
        scene.add_anchor(lvl, (0, 0, 0),
                         offsets=rng.uniform(-0.25, 0.25, (k, 3)),
                         scales=np.full((k, 3), 0.35 / (lvl + 1)),
                         opacities=np.full(k, 0.85),
                         colors=np.clip(np.full((k, 3), palette[lvl])
                                        * rng.uniform(0.8, 1.2, (k, 3)), 0, 1))
    return scene


def random_splat_batch(rng: np.random.Generator, n: int, width: int, height: int):
    """Random 2D splats for renderer-oracle equivalence tests."""
    from octsplat.rasterizer import SplatBatch
    mean2d = np.stack([rng.uniform(-8, width + 8, n), rng.uniform(-8, height + 8, n)], axis=1)
    # random SPD 2x2 covariances with moderate anisotropy
    angles = rng.uniform(0, np.pi, n)
    l1 = rng.uniform(1.0, 30.0, n)
    l2 = l1 * rng.uniform(0.3, 1.0, n)
    ca, sa = np.cos(angles), np.sin(angles)
    a = ca**2 * l1 + sa**2 * l2
    c = sa**2 * l1 + ca**2 * l2
    b = ca * sa * (l1 - l2)
    det = a * c - b * b
    qa, qb, qc = c / det, -b / det, a / det
    lam_max = 0.5 * (a + c) + np.sqrt((0.5 * (a - c))**2 + b * b)
    return SplatBatch(
        mean2d=mean2d, qa=qa, qb=qb, qc=qc,
        depth=rng.uniform(0.5, 20.0, n),
        alpha=rng.uniform(0.05, 1.0, n),
        color=rng.uniform(0, 1, (n, 3)),
        radius=3.0 * np.sqrt(lam_max),
        source=np.arange(n, dtype=np.int64),
    )
