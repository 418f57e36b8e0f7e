"""Two-stage training: progressive coarse-to-fine activation, then full
optimization with adaptive anchor growing and pruning.

Stage 1 starts with levels 0..floor(K/2) active and activates one finer
level after each interval N0 * omega^(i+m); promotion to the next level is
disabled during stage 1. Every `stat_interval` iterations the windowed
per-child screen-gradient average decides growth: values in
(tau_g * 2^(beta*l), tau_g * 2^(beta*(l+1))] grow a same-level anchor at
the child's voxel, larger values promote to level l+1. Anchors whose
children's windowed mean rendered opacity falls below the prune threshold
are removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .builder import quantize
from .gradients import LossConfig, ParamGrads, backward
from .lod import LodQuery, select
from .scene import Camera, OctreeScene, SceneError

DEFAULT_LEARNING_RATES = {
    "offsets": 1.6e-4,
    "scales": 5e-3,
    "rotations": 1e-3,
    "opacities": 5e-2,
    "colors": 2.5e-3,
    "lod_bias": 1e-3,
}

_SCALE_FLOOR = 1e-6
_QUAT_RENORM_TOL = 5e-7


@dataclass
class TrainConfig:
    tau_g: float = 0.0002
    beta: float = 0.2
    stat_interval: int = 100
    n0: int = 8000
    omega: float = 0.5
    initial_level: int | None = None  # defaults to floor(K/2)
    stage1_iters: int = 10000
    stage2_iters: int = 30000
    w_l1: float = 0.8
    w_ssim: float = 0.2
    w_vol: float = 0.01
    prune_opacity: float = 0.01
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    def validate(self) -> None:
        if self.tau_g <= 0 or self.beta <= 0:
            raise SceneError("tau_g and beta must be positive")
        if self.stat_interval <= 0 or self.n0 <= 0:
            raise SceneError("stat_interval and n0 must be positive")
        if not (0.0 < self.omega < 1.0):
            raise SceneError("omega must lie in (0, 1)")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise SceneError("iteration counts must be non-negative")
        if self.prune_opacity < 0:
            raise SceneError("prune threshold must be non-negative")
        for name, lr in self.learning_rates.items():
            if lr < 0:
                raise SceneError(f"negative learning rate for {name}")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.w_l1, self.w_ssim, self.w_vol)

    def resolved_initial_level(self, k_levels: int) -> int:
        i = k_levels // 2 if self.initial_level is None else int(self.initial_level)
        if not 0 <= i <= k_levels - 1:
            raise SceneError(f"initial level {i} outside [0, {k_levels - 1}]")
        return i


def growth_threshold(cfg: TrainConfig, level: int) -> float:
    """Level-scaled growth threshold tau_g * 2^(beta * level)."""
    return cfg.tau_g * 2.0 ** (cfg.beta * level)


def volume_regularizer(scene: OctreeScene, selection: LodQuery) -> float:
    """Sum over selected children of the product of their scale components."""
    sel = np.flatnonzero(selection.include)
    if len(sel) == 0:
        return 0.0
    s = scene.scales[sel].astype(np.float64)
    return float(np.sum(np.prod(s, axis=-1)))


def progressive_schedule(cfg: TrainConfig, k_levels: int) -> list[tuple[int, int]]:
    """(activation iteration, level) pairs for stage 1.

    Levels 0..i are active from iteration 0; level i+m activates
    N0 * omega^(i+m-1) iterations after level i+m-1 (consecutive
    intervals). Activations falling beyond stage1_iters are dropped —
    stage 2 activates everything.
    """
    cfg.validate()
    i = cfg.resolved_initial_level(k_levels)
    schedule = [(0, level) for level in range(i + 1)]
    t = 0.0
    for level in range(i + 1, k_levels):
        t += cfg.n0 * cfg.omega ** (level - 1)
        it = int(round(t))
        if it > cfg.stage1_iters:
            break
        schedule.append((it, level))
    return schedule


# ---------------------------------------------------------------------------
# anchor control


@dataclass
class ControlReport:
    added_per_level: list
    removed_per_level: list
    kept_indices: np.ndarray  # old anchor indices that survived, in order
    n_added: int
    removed_avg_opacity: list


def anchor_control(scene: OctreeScene, stats, cfg: TrainConfig,
                   stage: int) -> ControlReport:
    """One densification round over the accumulated window statistics.

    `stats` is the scene's GrowthStats block (grad/opacity accumulators and
    counts); it is consumed and reset. Promotion to the next level only
    happens in stage 2. New anchors inherit the triggering child's
    attributes, centered on the target voxel with zero bias.
    """
    k_levels = scene.num_levels
    m_before = scene.anchor_count
    grad_accum = stats.grad_accum if hasattr(stats, "grad_accum") else scene.grad_accum
    opacity_accum = stats.opacity_accum if hasattr(stats, "opacity_accum") else scene.opacity_accum
    count = stats.count if hasattr(stats, "count") else scene.stat_count
    count = np.asarray(count)

    added = [0] * k_levels
    removed = [0] * k_levels

    observed = count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        grad_avg = np.where(observed[:, None], grad_accum / np.maximum(count, 1)[:, None], 0.0)
        opac_avg = np.where(observed[:, None], opacity_accum / np.maximum(count, 1)[:, None], 0.0)

    centers = scene.voxel_centers
    offsets = scene.offsets.astype(np.float64)
    for a in range(m_before):
        if not observed[a]:
            continue
        level = int(scene.levels[a])
        tau_here = growth_threshold(cfg, level)
        tau_next = growth_threshold(cfg, level + 1)
        for c in range(scene.children_per_anchor):
            g = grad_avg[a, c]
            if g <= tau_here:
                continue
            if g <= tau_next or stage == 1:
                target_level = level
            else:
                # promotion; at the finest level extra signal still grows
                # in place rather than spilling outside the octree
                target_level = min(level + 1, k_levels - 1)
            if stage == 1 and target_level != level:
                continue
            child_pos = centers[a] + offsets[a, c]
            lattice = quantize(child_pos, scene.voxel_size(target_level))[0]
            if scene.has_anchor(target_level, lattice):
                continue
            voxel_center = lattice.astype(np.float64) * scene.voxel_size(target_level)
            k = scene.children_per_anchor
            scene.add_anchor(
                target_level, lattice,
                lod_bias=0.0,
                offsets=np.tile(child_pos - voxel_center, (k, 1)),
                scales=np.tile(scene.scales[a, c], (k, 1)),
                rotations=np.tile(scene.rotations[a, c], (k, 1)),
                opacities=np.full(k, scene.opacities[a, c]),
                colors=np.tile(scene.colors[a, c], (k, 1)),
            )
            added[target_level] += 1

    # prune: windowed mean rendered opacity below threshold (anchors never
    # observed in the window keep the benefit of the doubt)
    keep = np.ones(scene.anchor_count, dtype=bool)
    removed_avg = []
    for a in range(m_before):
        if not observed[a]:
            continue
        avg = float(np.mean(opac_avg[a]))
        if avg < cfg.prune_opacity:
            keep[a] = False
            removed[int(scene.levels[a])] += 1
            removed_avg.append(avg)
    kept = scene.keep_anchors(keep)
    scene.reset_grow_stats()
    scene.validate()
    n_added = sum(added)
    # kept indices of pre-control anchors only (new ones appended after)
    kept_old = kept[kept < m_before]
    return ControlReport(added, removed, kept_old, n_added, removed_avg)


# ---------------------------------------------------------------------------
# optimizer


class AdamOptimizer:
    """Bias-corrected Adam over the scene's parameter groups.

    Moments are float64 and shaped like the scene arrays; child parameters
    are written back as float32. After each step the constraint projections
    run: opacity and color clamp to [0,1], scales stay strictly positive,
    quaternions renormalize, lod_bias clamps to [-1, 1].
    """

    GROUPS = ("offsets", "scales", "rotations", "opacities", "colors", "lod_bias")

    def __init__(self, scene: OctreeScene, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {g: np.zeros(getattr(scene, g).shape) for g in self.GROUPS}
        self.v = {g: np.zeros(getattr(scene, g).shape) for g in self.GROUPS}

    def step(self, scene: OctreeScene, grads: ParamGrads) -> None:
        self.t += 1
        cfg = self.cfg
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for group in self.GROUPS:
            g = getattr(grads, group)
            lr = cfg.learning_rates.get(group, 0.0)
            self.m[group] = b1 * self.m[group] + (1 - b1) * g
            self.v[group] = b2 * self.v[group] + (1 - b2) * g * g
            m_hat = self.m[group] / corr1
            v_hat = self.v[group] / corr2
            update = lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            current = getattr(scene, group).astype(np.float64)
            new = current - update
            if group == "lod_bias":
                scene.lod_bias = np.clip(new, -1.0, 1.0)
            else:
                setattr(scene, group, new.astype(np.float32))
        self._project(scene)

    @staticmethod
    def _project(scene: OctreeScene) -> None:
        scene.opacities = np.clip(scene.opacities, 0.0, 1.0)
        scene.colors = np.clip(scene.colors, 0.0, 1.0)
        scene.scales = np.maximum(scene.scales, np.float32(_SCALE_FLOOR))
        q = scene.rotations.astype(np.float64)
        norm = np.linalg.norm(q, axis=-1)
        stale = np.abs(norm - 1.0) > _QUAT_RENORM_TOL
        if np.any(stale):
            q[stale] = q[stale] / norm[stale][..., None]
            scene.rotations = q.astype(np.float32)

    def reindex(self, kept_old: np.ndarray, n_added: int, scene: OctreeScene) -> None:
        """Keep moments for surviving anchors, zeros for grown ones."""
        for group in self.GROUPS:
            shape = getattr(scene, group).shape
            for store in (self.m, self.v):
                old = store[group]
                fresh = np.zeros(shape)
                fresh[:len(kept_old)] = old[kept_old]
                store[group] = fresh


# ---------------------------------------------------------------------------
# the training loop


def _active_level_at(schedule: list[tuple[int, int]], iteration: int) -> int:
    level = 0
    for it, lvl in schedule:
        if iteration >= it:
            level = max(level, lvl)
    return level


def train(scene: OctreeScene, dataset: list[tuple[Camera, np.ndarray]],
          cfg: TrainConfig | None = None, *, seed: int = 42
          ) -> tuple[OctreeScene, list[dict]]:
    """Run both training stages in place; returns the scene and the log.

    The log holds one record per iteration (losses, active levels, anchor
    counts) plus one record per anchor-control event.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not dataset:
        raise SceneError("empty dataset")
    for cam, img in dataset:
        img = np.asarray(img)
        if img.shape != (cam.height, cam.width, 3):
            raise SceneError(
                f"image shape {img.shape} does not match camera resolution "
                f"({cam.height}, {cam.width}, 3)")

    schedule = progressive_schedule(cfg, scene.num_levels)
    loss_cfg = cfg.loss_config()
    optimizer = AdamOptimizer(scene, cfg)
    rng = np.random.default_rng(seed)
    log: list[dict] = []

    view_order: list[int] = []

    def next_view() -> int:
        nonlocal view_order
        if not view_order:
            view_order = list(rng.permutation(len(dataset)))
        return view_order.pop(0)

    total = cfg.stage1_iters + cfg.stage2_iters
    for iteration in range(1, total + 1):
        stage = 1 if iteration <= cfg.stage1_iters else 2
        if stage == 1:
            max_level = _active_level_at(schedule, iteration - 1)
        else:
            max_level = scene.num_levels - 1
        cam, img = dataset[next_view()]
        loss, grads = backward(scene, cam, img, loss_cfg, max_level=max_level)
        optimizer.step(scene, grads)

        scene.grad_accum += grads.screen_grad_norm
        scene.opacity_accum += grads.alpha_eff
        # count iterations in which the anchor actually rendered, so a
        # window spent outside the view cannot read as transparency
        scene.stat_count += grads.rendered.any(axis=1).astype(np.int64)

        terms = grads.loss_terms or {}
        log.append({
            "iter": iteration,
            "stage": stage,
            "loss": float(loss),
            "l1": terms.get("l1"),
            "ssim": terms.get("ssim"),
            "vol": terms.get("vol"),
            "active_levels": int(max_level) + 1,
            "anchors_per_level": scene.counts_per_level(),
        })

        if iteration % cfg.stat_interval == 0:
            report = anchor_control(scene, scene, cfg, stage)
            optimizer.reindex(report.kept_indices, report.n_added, scene)
            log.append({
                "iter": iteration,
                "event": "control",
                "stage": stage,
                "added_per_level": report.added_per_level,
                "removed_per_level": report.removed_per_level,
                "removed_avg_opacity": report.removed_avg_opacity,
                "anchors_per_level": scene.counts_per_level(),
            })
    return scene, log
