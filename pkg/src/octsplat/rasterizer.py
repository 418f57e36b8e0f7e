"""Software rasterizer: EWA projection and front-to-back alpha compositing.

Two render paths share one compositing core: a brute-force reference that
walks every splat for every pixel, and a 16x16 tile-binned path that must
match it to 1e-5 per channel (they are in fact bit-identical, because both
evaluate the same per-pixel expressions in the same global depth order).

Conventions: near-plane cull at z = 0.01, a 0.3 px^2 isotropic covariance
regularizer, alpha cutoff 1/255, per-pixel termination at transmittance
1e-4, and compact support inside the splat's 3-sigma bounding square.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lod import LodQuery, counts_per_level, select, selected_primitive_count
from .scene import Camera, GaussianPrimitive, OctreeScene, quat_normalize, quat_to_rot, round_half_away

TILE = 16
NEAR_PLANE = 0.01
COV2D_REG = 0.3
ALPHA_CUTOFF = 1.0 / 255.0
T_STOP = 1e-4
RADIUS_SIGMAS = 3.0


@dataclass
class Splat2D:
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2,2) pixels^2, regularized
    depth: float  # camera-space z
    opacity: float
    color: np.ndarray  # (3,)
    radius: float  # 3 sigma_max in pixels
    source: int = 0


@dataclass
class Framebuffer:
    color: np.ndarray  # (H,W,3) in [0,1]
    transmittance: np.ndarray  # (H,W) in [0,1]

    @classmethod
    def blank(cls, width: int, height: int) -> "Framebuffer":
        return cls(np.zeros((height, width, 3)), np.ones((height, width)))


@dataclass
class RenderStats:
    counts_per_level: list
    num_primitives: int
    render_ms: float
    lstar: float
    lhat: int


@dataclass
class SplatBatch:
    """Array-of-splats form used by the compositing core and the backward."""

    mean2d: np.ndarray  # (N,2)
    qa: np.ndarray  # conic entries: maha = qa dx^2 + 2 qb dx dy + qc dy^2
    qb: np.ndarray
    qc: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray  # effective opacity (child opacity x blend weight)
    color: np.ndarray  # (N,3)
    radius: np.ndarray
    source: np.ndarray  # (N,) tie-break key, stable across culling

    def __len__(self) -> int:
        return len(self.depth)

    def sorted_order(self) -> np.ndarray:
        return np.lexsort((self.source, self.depth))


@dataclass
class ProjectionCache:
    """Forward intermediates the analytic backward pass reuses."""

    cam: Camera
    w_mat: np.ndarray  # (3,3) world-to-camera rotation
    xc: np.ndarray  # (N,3) camera-space centers
    jac: np.ndarray  # (N,2,3) pinhole Jacobians
    m_cam: np.ndarray  # (N,3,3) camera-space 3D covariances
    sigma_world: np.ndarray  # (N,3,3)
    rot_mat: np.ndarray  # (N,3,3) child rotations (from normalized quats)
    q_unit: np.ndarray  # (N,4)
    q_norm: np.ndarray  # (N,)
    scale: np.ndarray  # (N,3)
    opacity: np.ndarray  # (N,) raw child opacity parameter
    weight: np.ndarray  # (N,) anchor blend weight applied as opacity scale
    cov2d: np.ndarray  # (N,2,2) regularized
    conic: np.ndarray  # (N,2,2) inverse of cov2d
    anchor_idx: np.ndarray  # (N,) source anchor per splat
    child_idx: np.ndarray  # (N,) child slot per splat


def _conic_and_radius(cov2d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    qa = c / det
    qb = -b / det
    qc = a / det
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    radius = RADIUS_SIGMAS * np.sqrt(lam_max)
    return qa, qb, qc, radius, det


def project_points(centers: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Camera-space coordinates and pixel positions of world points."""
    w_mat = cam.rotation_matrix()
    xc = (centers - cam.position) @ w_mat.T
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean2d = np.stack([
            cam.fx * xc[:, 0] / z + cam.cx,
            cam.fy * xc[:, 1] / z + cam.cy,
        ], axis=1)
    return xc, mean2d


def project_batch(centers, scales, rotations, opacities, weights, colors,
                  cam: Camera, anchor_idx=None, child_idx=None
                  ) -> tuple[SplatBatch, ProjectionCache]:
    """EWA-project children to 2D splats, culling behind the near plane.

    cov2d = (J W Sigma W^T J^T)[:2,:2] + 0.3 I with the pinhole Jacobian J.
    The returned batch contains only surviving splats; `source` indices
    refer to the pre-cull ordering so depth ties break stably.
    """
    n = len(centers)
    centers = np.asarray(centers, dtype=np.float64).reshape(n, 3)
    scales = np.asarray(scales, dtype=np.float64).reshape(n, 3)
    rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
    opacities = np.asarray(opacities, dtype=np.float64).reshape(n)
    weights = np.asarray(weights, dtype=np.float64).reshape(n)
    colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
    anchor_idx = np.zeros(n, dtype=np.int64) if anchor_idx is None else np.asarray(anchor_idx, dtype=np.int64)
    child_idx = np.zeros(n, dtype=np.int64) if child_idx is None else np.asarray(child_idx, dtype=np.int64)

    w_mat = cam.rotation_matrix()
    xc_all = (centers - cam.position) @ w_mat.T
    keep = xc_all[:, 2] > NEAR_PLANE
    idx = np.flatnonzero(keep)
    xc = xc_all[idx]
    z = xc[:, 2]

    q_norm = np.linalg.norm(rotations[idx], axis=1)
    q_unit = rotations[idx] / q_norm[:, None]
    rot_mat = quat_to_rot(q_unit)
    s = scales[idx]
    n_mat = rot_mat * s[:, None, :]  # R diag(s)
    sigma_world = n_mat @ np.swapaxes(n_mat, 1, 2)
    m_cam = w_mat @ sigma_world @ w_mat.T

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * xc[:, 0] / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * xc[:, 1] / z**2
    cov2d = jac @ m_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG

    qa, qb, qc, radius, det = _conic_and_radius(cov2d)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = qa
    conic[:, 0, 1] = qb
    conic[:, 1, 0] = qb
    conic[:, 1, 1] = qc

    mean2d = np.stack([cam.fx * xc[:, 0] / z + cam.cx,
                       cam.fy * xc[:, 1] / z + cam.cy], axis=1)
    batch = SplatBatch(
        mean2d=mean2d, qa=qa, qb=qb, qc=qc, depth=z.copy(),
        alpha=opacities[idx] * weights[idx], color=colors[idx],
        radius=radius, source=idx.astype(np.int64),
    )
    cache = ProjectionCache(
        cam=cam, w_mat=w_mat, xc=xc, jac=jac, m_cam=m_cam,
        sigma_world=sigma_world, rot_mat=rot_mat, q_unit=q_unit,
        q_norm=q_norm, scale=s, opacity=opacities[idx], weight=weights[idx],
        cov2d=cov2d, conic=conic,
        anchor_idx=anchor_idx[idx], child_idx=child_idx[idx],
    )
    return batch, cache


def project(p: GaussianPrimitive, opacity_scale: float, cam: Camera) -> Splat2D | None:
    """Project one primitive; returns None when culled by the near plane."""
    batch, _ = project_batch(
        p.center[None], p.scale[None], p.rotation[None],
        np.array([p.opacity]), np.array([opacity_scale]), p.color[None], cam,
    )
    if len(batch) == 0:
        return None
    cov2d = np.array([[batch.qc[0], -batch.qb[0]], [-batch.qb[0], batch.qa[0]]])
    det = batch.qa[0] * batch.qc[0] - batch.qb[0] ** 2
    return Splat2D(
        mean2d=batch.mean2d[0], cov2d=cov2d / det, depth=float(batch.depth[0]),
        opacity=float(batch.alpha[0]), color=batch.color[0],
        radius=float(batch.radius[0]), source=0,
    )


def batch_from_splats(splats: list[Splat2D]) -> SplatBatch:
    n = len(splats)
    mean2d = np.zeros((n, 2))
    qa = np.zeros(n)
    qb = np.zeros(n)
    qc = np.zeros(n)
    depth = np.zeros(n)
    alpha = np.zeros(n)
    color = np.zeros((n, 3))
    radius = np.zeros(n)
    source = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(splats):
        cov = np.asarray(s.cov2d, dtype=np.float64)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        mean2d[i] = s.mean2d
        qa[i] = cov[1, 1] / det
        qb[i] = -cov[0, 1] / det
        qc[i] = cov[0, 0] / det
        depth[i] = s.depth
        alpha[i] = s.opacity
        color[i] = s.color
        radius[i] = s.radius
        source[i] = s.source
    return SplatBatch(mean2d, qa, qb, qc, depth, alpha, color, radius, source)


# ---------------------------------------------------------------------------
# compositing core


def _composite_window(batch: SplatBatch, order, ys: np.ndarray, xs: np.ndarray,
                      color_out: np.ndarray, trans: np.ndarray) -> None:
    """Front-to-back alpha blending over one pixel window, in place.

    Per pixel and splat (in global depth order): sigma = alpha * G(pixel);
    contributions with sigma < 1/255 or outside the splat's bounding square
    are skipped, and a pixel stops accumulating once its transmittance
    drops below 1e-4.
    """
    x_lo, x_hi = xs[0], xs[-1]
    y_lo, y_hi = ys[0], ys[-1]
    for i in order:
        if not np.any(trans >= T_STOP):
            break
        mx, my = batch.mean2d[i]
        r = batch.radius[i]
        if mx + r < x_lo or mx - r > x_hi or my + r < y_lo or my - r > y_hi:
            continue
        dx = xs - mx
        dy = ys - my
        inside = (np.abs(dx) <= r)[None, :] & (np.abs(dy) <= r)[:, None]
        maha = (batch.qa[i] * (dx * dx))[None, :] \
            + (2.0 * batch.qb[i]) * (dy[:, None] * dx[None, :]) \
            + (batch.qc[i] * (dy * dy))[:, None]
        sigma = batch.alpha[i] * np.exp(-0.5 * np.where(inside, maha, np.inf))
        contrib = (sigma >= ALPHA_CUTOFF) & (trans >= T_STOP)
        if not np.any(contrib):
            continue
        tc = np.where(contrib, trans * sigma, 0.0)
        color_out += tc[:, :, None] * batch.color[i]
        trans[...] = np.where(contrib, trans * (1.0 - sigma), trans)


def render_reference(splats: list[Splat2D] | SplatBatch, width: int, height: int) -> Framebuffer:
    """Brute-force oracle: every splat visited for every pixel, depth order."""
    batch = splats if isinstance(splats, SplatBatch) else batch_from_splats(splats)
    fb = Framebuffer.blank(width, height)
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    _composite_window(batch, batch.sorted_order(), ys, xs, fb.color, fb.transmittance)
    return fb


def _composite_tile(batch: SplatBatch, members, ys: np.ndarray, xs: np.ndarray,
                    color_out: np.ndarray, trans: np.ndarray,
                    chunk: int = 64) -> None:
    """Tile-sized variant of _composite_window with no per-splat loop.

    Per element the arithmetic reproduces the sequential path bit-exactly:
    sigma uses the same expression tree; transmittance prefixes come from
    a left-associated multiply.accumulate seeded with the incoming value
    (skipped splats contribute an exact factor of 1.0); color prefixes use
    add.accumulate the same way. The per-pixel termination rule is exact
    too, because the naive prefix equals the true one up to the first
    crossing of the threshold and both stay below it afterwards.
    """
    members = np.asarray(members, dtype=np.int64)
    for start in range(0, len(members), chunk):
        if not np.any(trans >= T_STOP):
            break
        idx = members[start:start + chunk]
        mx = batch.mean2d[idx, 0]
        my = batch.mean2d[idx, 1]
        r = batch.radius[idx]
        dx = xs[None, :] - mx[:, None]  # (n, tw)
        dy = ys[None, :] - my[:, None]  # (n, th)
        inside = (np.abs(dx) <= r[:, None])[:, None, :] \
            & (np.abs(dy) <= r[:, None])[:, :, None]
        maha = (batch.qa[idx][:, None] * (dx * dx))[:, None, :] \
            + (2.0 * batch.qb[idx])[:, None, None] * (dy[:, :, None] * dx[:, None, :]) \
            + (batch.qc[idx][:, None] * (dy * dy))[:, :, None]
        sigma = batch.alpha[idx][:, None, None] * np.exp(-0.5 * np.where(inside, maha, np.inf))
        above = sigma >= ALPHA_CUTOFF
        sig_eff = np.where(above, sigma, 0.0)
        t_prefix = np.multiply.accumulate(
            np.concatenate([trans[None], (1.0 - sig_eff)[:-1]]), axis=0)
        contrib = above & (t_prefix >= T_STOP)
        weights = np.where(contrib, t_prefix * sigma, 0.0)
        color_out[...] = np.add.accumulate(
            np.concatenate([color_out[None],
                            weights[:, :, :, None] * batch.color[idx][:, None, None, :]]),
            axis=0)[-1]
        factors = np.where(contrib, 1.0 - sigma, 1.0)
        trans[...] = np.multiply.accumulate(
            np.concatenate([trans[None], factors]), axis=0)[-1]


def _tile_lists(batch: SplatBatch, order, width: int, height: int, tile: int) -> dict:
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    lists: dict[tuple[int, int], list[int]] = {}
    for i in order:
        mx, my = batch.mean2d[i]
        r = batch.radius[i]
        if mx + r < 0 or mx - r > width - 1 or my + r < 0 or my - r > height - 1:
            continue
        tx0 = max(0, int(np.floor((mx - r) / tile)))
        tx1 = min(ntx - 1, int(np.floor((mx + r) / tile)))
        ty0 = max(0, int(np.floor((my - r) / tile)))
        ty1 = min(nty - 1, int(np.floor((my + r) / tile)))
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                lists.setdefault((ty, tx), []).append(i)
    return lists


def render_tiled(splats: list[Splat2D] | SplatBatch, width: int, height: int,
                 tile: int = TILE, workers: int = 1) -> Framebuffer:
    """Tile-binned renderer; output is identical to render_reference.

    Splats are binned to tiles their bounding square overlaps; each tile
    composites its list in the global (depth, source) order. Tiles are
    independent, so `workers` > 1 renders them in a thread pool without
    changing the result.
    """
    batch = splats if isinstance(splats, SplatBatch) else batch_from_splats(splats)
    fb = Framebuffer.blank(width, height)
    order = batch.sorted_order()
    lists = _tile_lists(batch, order, width, height, tile)

    def run_tile(item):
        (ty, tx), members = item
        y0, y1 = ty * tile, min((ty + 1) * tile, height)
        x0, x1 = tx * tile, min((tx + 1) * tile, width)
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        color = np.zeros((y1 - y0, x1 - x0, 3))
        trans = np.ones((y1 - y0, x1 - x0))
        _composite_tile(batch, members, ys, xs, color, trans)
        return (y0, y1, x0, x1), color, trans

    items = list(lists.items())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, items))
    else:
        results = [run_tile(item) for item in items]
    for (y0, y1, x0, x1), color, trans in results:
        fb.color[y0:y1, x0:x1] = color
        fb.transmittance[y0:y1, x0:x1] = trans
    return fb


# ---------------------------------------------------------------------------
# scene-level rendering


def gather_children(scene: OctreeScene, query: LodQuery):
    """Flatten the selected anchors' children for projection.

    Returns (centers, scales, rotations, opacities, weights, colors,
    anchor_idx, child_idx) with one row per child, in anchor-major order.
    """
    sel = np.flatnonzero(query.include)
    k = scene.children_per_anchor
    centers = (scene.voxel_centers[sel, None, :] + scene.offsets[sel].astype(np.float64)).reshape(-1, 3)
    scales = scene.scales[sel].astype(np.float64).reshape(-1, 3)
    rotations = scene.rotations[sel].astype(np.float64).reshape(-1, 4)
    opacities = scene.opacities[sel].astype(np.float64).reshape(-1)
    weights = np.repeat(query.weight[sel], k)
    colors = scene.colors[sel].astype(np.float64).reshape(-1, 3)
    anchor_idx = np.repeat(sel, k)
    child_idx = np.tile(np.arange(k, dtype=np.int64), len(sel))
    return centers, scales, rotations, opacities, weights, colors, anchor_idx, child_idx


def scene_lod_summary(scene: OctreeScene, camera: Camera) -> tuple[float, int]:
    """Representative (L*, L-hat) from the camera-to-centroid distance."""
    if scene.anchor_count == 0:
        return 0.0, 0
    d = max(float(np.linalg.norm(camera.position - scene.centroid())) * camera.footprint_scale, 1e-12)
    lstar = float(np.clip(np.log2(scene.d_max_hat / d), 0.0, scene.num_levels - 1))
    return lstar, int(round_half_away(lstar))


def render_view(scene: OctreeScene, camera: Camera, mode: str = "inference", *,
                workers: int = 1, max_level: int | None = None,
                lod_override: int | None = None,
                frustum_cull: bool = False) -> tuple[Framebuffer, RenderStats]:
    """Select by LOD, project the included children, and render tiled.

    mode: "train" (hard mask), "inference" (cross-level blending), or
    "all" (LOD disabled: every anchor at full weight).
    """
    if mode not in ("train", "inference", "all"):
        raise ValueError(f"unknown render mode {mode!r}")
    t0 = time.perf_counter()
    if mode == "all":
        query = select(scene, camera, train_mode=True,
                       lod_override=scene.num_levels - 1, max_level=max_level,
                       frustum_cull=frustum_cull)
    else:
        query = select(scene, camera, train_mode=(mode == "train"),
                       max_level=max_level, lod_override=lod_override,
                       frustum_cull=frustum_cull)
    gathered = gather_children(scene, query)
    batch, _ = project_batch(*gathered[:6], camera,
                             anchor_idx=gathered[6], child_idx=gathered[7])
    fb = render_tiled(batch, camera.width, camera.height, workers=workers)
    ms = (time.perf_counter() - t0) * 1000.0
    lstar, lhat = scene_lod_summary(scene, camera)
    stats = RenderStats(
        counts_per_level=counts_per_level(query, scene),
        num_primitives=selected_primitive_count(query, scene),
        render_ms=ms, lstar=lstar, lhat=lhat,
    )
    return fb, stats
