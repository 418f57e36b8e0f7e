"""Analytic backward pass of the rendering loss.

The training forward is the hard LOD mask with the straight-through
transition weight (see lod.select's blend_transition flag); its loss is
0.8 L1 + 0.2 (1 - SSIM) + 0.01 * sum of child scale-volume products over
the selected children. The backward differentiates exactly that compute
graph: alpha compositing with its cutoffs, the 2D Gaussian, the pinhole
projection Jacobian, covariance assembly from scale/quaternion, and the
transition blend weight into lod_bias.

finite_difference_oracle re-evaluates the same loss at perturbed
parameters; since child attributes are stored in float32, the oracle
divides by the realized parameter spacing rather than the nominal 2h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lod import select
from .metrics import gaussian_kernel_1d, filter2d_same, ssim_terms
from .rasterizer import (ALPHA_CUTOFF, T_STOP, ProjectionCache, SplatBatch,
                         gather_children, project_batch)
from .scene import Camera, OctreeScene, SceneError


@dataclass
class LossConfig:
    w_l1: float = 0.8
    w_ssim: float = 0.2
    w_vol: float = 0.01


@dataclass
class ParamGrads:
    """Gradients shaped exactly like the scene's learnable arrays.

    Entries are zero for children whose anchors this view did not select.
    `screen_grad_norm` is the per-child norm of dL/dmean2d (the statistic
    anchor control thresholds); `rendered` and `alpha_eff` describe which
    children actually reached the rasterizer and at what opacity.
    """

    offsets: np.ndarray  # (M,k,3)
    scales: np.ndarray  # (M,k,3)
    rotations: np.ndarray  # (M,k,4)
    opacities: np.ndarray  # (M,k)
    colors: np.ndarray  # (M,k,3)
    lod_bias: np.ndarray  # (M,)
    screen_grad_norm: np.ndarray  # (M,k)
    rendered: np.ndarray  # (M,k) bool
    alpha_eff: np.ndarray  # (M,k)
    selected: np.ndarray  # (M,) bool anchor mask
    loss_terms: dict | None = None  # {"l1", "ssim", "vol"} diagnostics

    @classmethod
    def zeros(cls, scene: OctreeScene) -> "ParamGrads":
        m, k = scene.anchor_count, scene.children_per_anchor
        return cls(
            offsets=np.zeros((m, k, 3)), scales=np.zeros((m, k, 3)),
            rotations=np.zeros((m, k, 4)), opacities=np.zeros((m, k)),
            colors=np.zeros((m, k, 3)), lod_bias=np.zeros(m),
            screen_grad_norm=np.zeros((m, k)),
            rendered=np.zeros((m, k), dtype=bool), alpha_eff=np.zeros((m, k)),
            selected=np.zeros(m, dtype=bool),
        )


# ---------------------------------------------------------------------------
# image losses with gradients


def l1_with_grad(img: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = img - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def ssim_with_grad(img: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient w.r.t. `img` (per channel, averaged)."""
    kern = gaussian_kernel_1d()
    n_pix = img.shape[0] * img.shape[1]
    n_ch = img.shape[2]
    grad = np.zeros_like(img)
    vals = []
    for c in range(n_ch):
        x = img[:, :, c]
        y = target[:, :, c]
        t = ssim_terms(x, y, kern)
        s, a1, a2, b1, b2 = t["s"], t["a1"], t["a2"], t["b1"], t["b2"]
        mu_x, mu_y = t["mu_x"], t["mu_y"]
        vals.append(float(np.mean(s)))
        # S depends on x through mu_x = F(x), F(x^2) and F(xy); the three
        # filtered sensitivities push back through the (symmetric) window.
        ds_dmu = 2.0 * (mu_y * (s / a1 - s / a2) + mu_x * (s / b2 - s / b1))
        ds_dmxx = -s / b2
        ds_dmxy = 2.0 * s / a2
        grad[:, :, c] = (filter2d_same(ds_dmu, kern)
                         + 2.0 * x * filter2d_same(ds_dmxx, kern)
                         + y * filter2d_same(ds_dmxy, kern)) / n_pix
    return float(np.mean(vals)), grad / n_ch


def volume_with_grad(scene: OctreeScene, include_mask: np.ndarray
                     ) -> tuple[float, np.ndarray]:
    """Sum of per-child scale products over selected anchors, plus grads."""
    sel = np.flatnonzero(include_mask)
    s = scene.scales[sel].astype(np.float64)  # (n,k,3)
    vol = float(np.sum(np.prod(s, axis=-1)))
    grads = np.zeros((scene.anchor_count, scene.children_per_anchor, 3))
    if len(sel):
        g = np.stack([s[..., 1] * s[..., 2],
                      s[..., 0] * s[..., 2],
                      s[..., 0] * s[..., 1]], axis=-1)
        grads[sel] = g
    return vol, grads


# ---------------------------------------------------------------------------
# recording forward + raster backward


@dataclass
class _SplatRecord:
    index: int  # row in the batch
    y0: int
    x0: int
    sigma: np.ndarray
    contrib: np.ndarray
    t_before: np.ndarray


def _forward_record(batch: SplatBatch, width: int, height: int
                    ) -> tuple[np.ndarray, np.ndarray, list[_SplatRecord]]:
    """Reference-order compositing that keeps per-splat intermediates.

    Produces bit-identical output to the render paths (same per-pixel
    expressions in the same global order), while recording each splat's
    window, sigma values, contribution mask and pre-blend transmittance.
    """
    color = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    records: list[_SplatRecord] = []
    order = batch.sorted_order()
    for i in order:
        mx, my = batch.mean2d[i]
        r = batch.radius[i]
        x0 = max(0, int(np.ceil(mx - r)))
        x1 = min(width - 1, int(np.floor(mx + r)))
        y0 = max(0, int(np.ceil(my - r)))
        y1 = min(height - 1, int(np.floor(my + r)))
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        dx = xs - mx
        dy = ys - my
        inside = (np.abs(dx) <= r)[None, :] & (np.abs(dy) <= r)[:, None]
        maha = (batch.qa[i] * (dx * dx))[None, :] \
            + (2.0 * batch.qb[i]) * (dy[:, None] * dx[None, :]) \
            + (batch.qc[i] * (dy * dy))[:, None]
        sigma = batch.alpha[i] * np.exp(-0.5 * np.where(inside, maha, np.inf))
        t_win = trans[y0:y1 + 1, x0:x1 + 1]
        contrib = (sigma >= ALPHA_CUTOFF) & (t_win >= T_STOP)
        if not np.any(contrib):
            continue
        tc = np.where(contrib, t_win * sigma, 0.0)
        color[y0:y1 + 1, x0:x1 + 1] += tc[:, :, None] * batch.color[i]
        records.append(_SplatRecord(i, y0, x0, sigma, contrib, t_win.copy()))
        trans[y0:y1 + 1, x0:x1 + 1] = np.where(contrib, t_win * (1.0 - sigma), t_win)
    return color, trans, records


def _raster_backward(batch: SplatBatch, records: list[_SplatRecord],
                     grad_image: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-splat gradients of the image loss through alpha compositing.

    Returns (g_mean2d (N,2), g_conic (N,2,2), g_alpha (N,), g_color (N,3)).
    The suffix accumulator A replays compositing back-to-front, so no
    division by (1 - sigma) is needed and sigma = 1 is handled exactly.
    """
    n = len(batch)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    g_alpha = np.zeros(n)
    g_color = np.zeros((n, 3))
    height, width = grad_image.shape[:2]
    acc = np.zeros((height, width, 3))  # A_i: what later splats composite to
    for rec in reversed(records):
        i = rec.index
        h, w = rec.sigma.shape
        ys = slice(rec.y0, rec.y0 + h)
        xs = slice(rec.x0, rec.x0 + w)
        g_c = grad_image[ys, xs]
        a_win = acc[ys, xs]
        sig = rec.sigma
        t_b = rec.t_before
        m = rec.contrib
        w_ts = np.where(m, t_b * sig, 0.0)
        g_color[i] = np.einsum("yx,yxc->c", w_ts, g_c)
        # dC/dsigma_i = T_i (c_i - A_i) per channel
        g_sigma = np.where(m, t_b * np.einsum("yxc,yxc->yx", g_c, batch.color[i] - a_win), 0.0)
        acc[ys, xs] = np.where(m[:, :, None],
                               sig[:, :, None] * batch.color[i] + (1.0 - sig)[:, :, None] * a_win,
                               a_win)
        alpha = batch.alpha[i]
        if alpha <= 0.0:
            continue
        g_alpha[i] = float(np.sum(g_sigma * sig)) / alpha
        g_maha = -0.5 * g_sigma * sig
        dxs = np.arange(rec.x0, rec.x0 + w, dtype=np.float64) - batch.mean2d[i, 0]
        dys = np.arange(rec.y0, rec.y0 + h, dtype=np.float64) - batch.mean2d[i, 1]
        dxg = dxs[None, :]
        dyg = dys[:, None]
        g_mean2d[i, 0] = -np.sum(g_maha * (2.0 * batch.qa[i] * dxg + 2.0 * batch.qb[i] * dyg))
        g_mean2d[i, 1] = -np.sum(g_maha * (2.0 * batch.qb[i] * dxg + 2.0 * batch.qc[i] * dyg))
        gq00 = np.sum(g_maha * dxg * dxg)
        gq01 = np.sum(g_maha * dxg * dyg)
        gq11 = np.sum(g_maha * dyg * dyg)
        g_conic[i] = np.array([[gq00, gq01], [gq01, gq11]])
    return g_mean2d, g_conic, g_alpha, g_color


def _projection_backward(cache: ProjectionCache, g_mean2d, g_conic, g_alpha,
                         g_color) -> dict:
    """Chain 2D splat gradients back to the 3D child parameters."""
    n = len(cache.xc)
    cam = cache.cam
    xc = cache.xc
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]

    # conic = cov2d^-1  =>  dL/dcov2d = -Q gQ Q (all symmetric)
    q_mat = cache.conic
    g_cov2d = -q_mat @ g_conic @ q_mat

    jac = cache.jac
    m_cam = cache.m_cam
    g_jac = 2.0 * (g_cov2d @ jac @ m_cam)
    g_mcam = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    w_mat = cache.w_mat
    g_sigma_w = w_mat.T @ g_mcam @ w_mat

    # camera-space center gradient: projection of the mean ...
    g_xc = np.zeros((n, 3))
    g_xc[:, 0] = g_mean2d[:, 0] * cam.fx / z
    g_xc[:, 1] = g_mean2d[:, 1] * cam.fy / z
    g_xc[:, 2] = -g_mean2d[:, 0] * cam.fx * x / z**2 - g_mean2d[:, 1] * cam.fy * y / z**2
    # ... plus the Jacobian's own dependence on (x, y, z)
    g_xc[:, 0] += g_jac[:, 0, 2] * (-cam.fx / z**2)
    g_xc[:, 1] += g_jac[:, 1, 2] * (-cam.fy / z**2)
    g_xc[:, 2] += (g_jac[:, 0, 0] * (-cam.fx / z**2)
                   + g_jac[:, 1, 1] * (-cam.fy / z**2)
                   + g_jac[:, 0, 2] * (2.0 * cam.fx * x / z**3)
                   + g_jac[:, 1, 2] * (2.0 * cam.fy * y / z**3))
    g_center = g_xc @ w_mat  # dL/dx_world = W^T g_xc

    # Sigma = N N^T with N = R diag(s)
    n_mat = cache.rot_mat * cache.scale[:, None, :]
    g_n = 2.0 * (g_sigma_w @ n_mat)
    g_scale = np.einsum("nij,nij->nj", cache.rot_mat, g_n)
    g_rot = g_n * cache.scale[:, None, :]

    qw, qx, qy, qz = (cache.q_unit[:, 0], cache.q_unit[:, 1],
                      cache.q_unit[:, 2], cache.q_unit[:, 3])
    g = g_rot
    gq_unit = np.stack([
        2.0 * (qz * (g[:, 1, 0] - g[:, 0, 1]) + qy * (g[:, 0, 2] - g[:, 2, 0])
               + qx * (g[:, 2, 1] - g[:, 1, 2])),
        2.0 * (qy * (g[:, 0, 1] + g[:, 1, 0]) + qz * (g[:, 0, 2] + g[:, 2, 0])
               + qw * (g[:, 2, 1] - g[:, 1, 2]) - 2.0 * qx * (g[:, 1, 1] + g[:, 2, 2])),
        2.0 * (qx * (g[:, 0, 1] + g[:, 1, 0]) + qw * (g[:, 0, 2] - g[:, 2, 0])
               + qz * (g[:, 1, 2] + g[:, 2, 1]) - 2.0 * qy * (g[:, 0, 0] + g[:, 2, 2])),
        2.0 * (qw * (g[:, 1, 0] - g[:, 0, 1]) + qx * (g[:, 0, 2] + g[:, 2, 0])
               + qy * (g[:, 1, 2] + g[:, 2, 1]) - 2.0 * qz * (g[:, 0, 0] + g[:, 1, 1])),
    ], axis=1)
    # through quaternion normalization
    dot = np.einsum("ni,ni->n", cache.q_unit, gq_unit)
    g_quat = (gq_unit - cache.q_unit * dot[:, None]) / cache.q_norm[:, None]

    g_opacity = g_alpha * cache.weight
    g_weight = g_alpha * cache.opacity
    return {
        "center": g_center, "scale": g_scale, "quat": g_quat,
        "opacity": g_opacity, "color": g_color, "weight": g_weight,
        "mean2d_norm": np.linalg.norm(g_mean2d, axis=1),
    }


# ---------------------------------------------------------------------------
# the public entry points


def _forward_state(scene: OctreeScene, camera: Camera, max_level: int | None):
    query = select(scene, camera, train_mode=True, blend_transition=True,
                   max_level=max_level)
    gathered = gather_children(scene, query)
    batch, cache = project_batch(*gathered[:6], camera,
                                 anchor_idx=gathered[6], child_idx=gathered[7])
    image, trans, records = _forward_record(batch, camera.width, camera.height)
    return query, batch, cache, image, trans, records


def _check_target(camera: Camera, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (camera.height, camera.width, 3):
        raise SceneError(
            f"target shape {target.shape} does not match camera resolution "
            f"({camera.height}, {camera.width}, 3)")
    return target


def training_loss(scene: OctreeScene, camera: Camera, target: np.ndarray,
                  loss_cfg: LossConfig | None = None,
                  max_level: int | None = None) -> float:
    """The exact scalar that backward differentiates (used by the oracle)."""
    cfg = loss_cfg or LossConfig()
    target = _check_target(camera, target)
    query, batch, cache, image, trans, records = _forward_state(scene, camera, max_level)
    l1, _ = l1_with_grad(image, target)
    from .metrics import ssim
    ssim_val = ssim(image, target)
    vol, _ = volume_with_grad(scene, query.include)
    return cfg.w_l1 * l1 + cfg.w_ssim * (1.0 - ssim_val) + cfg.w_vol * vol


def backward(scene: OctreeScene, camera: Camera, target: np.ndarray,
             loss_cfg: LossConfig | None = None, *,
             max_level: int | None = None) -> tuple[float, ParamGrads]:
    """Loss and analytic gradients for one view's training render."""
    cfg = loss_cfg or LossConfig()
    target = _check_target(camera, target)
    query, batch, cache, image, trans, records = _forward_state(scene, camera, max_level)

    l1, g_l1 = l1_with_grad(image, target)
    ssim_val, g_ssim = ssim_with_grad(image, target)
    vol, g_vol_scales = volume_with_grad(scene, query.include)
    loss = cfg.w_l1 * l1 + cfg.w_ssim * (1.0 - ssim_val) + cfg.w_vol * vol
    grad_image = cfg.w_l1 * g_l1 - cfg.w_ssim * g_ssim

    g_mean2d, g_conic, g_alpha, g_color = _raster_backward(batch, records, grad_image)
    grads = ParamGrads.zeros(scene)
    grads.selected = query.include.copy()
    grads.scales += cfg.w_vol * g_vol_scales
    grads.loss_terms = {"l1": l1, "ssim": ssim_val, "vol": vol}

    if len(batch):
        chain = _projection_backward(cache, g_mean2d, g_conic, g_alpha, g_color)
        ai, ci = cache.anchor_idx, cache.child_idx
        grads.offsets[ai, ci] = chain["center"]
        grads.scales[ai, ci] += chain["scale"]
        grads.rotations[ai, ci] = chain["quat"]
        grads.opacities[ai, ci] = chain["opacity"]
        grads.colors[ai, ci] = chain["color"]
        grads.screen_grad_norm[ai, ci] = chain["mean2d_norm"]
        grads.rendered[ai, ci] = True
        grads.alpha_eff[ai, ci] = cache.opacity * cache.weight

        # lod_bias flows only through the transition-level blend weight,
        # and only where the clamp on L* is inactive.
        levels = scene.levels.astype(np.int64)
        floor_l = np.floor(query.lstar)
        bias_active = (query.include
                       & (levels > floor_l)
                       & (query.lstar_raw > 0.0)
                       & (query.lstar_raw < scene.num_levels - 1))
        g_bias = np.zeros(scene.anchor_count)
        np.add.at(g_bias, ai, chain["weight"])
        grads.lod_bias = np.where(bias_active, g_bias, 0.0)
    return loss, grads


# ---------------------------------------------------------------------------
# finite differences


def central_difference(f, x0: float, h: float) -> float:
    """(f(x0+h) - f(x0-h)) / (2h); exact for quadratics."""
    if h <= 0:
        raise ValueError("h must be positive")
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def pack_params(scene: OctreeScene) -> np.ndarray:
    """Flatten all learnables (offsets, scales, rotations, opacities,
    colors, lod_bias) to one float64 vector."""
    return np.concatenate([
        scene.offsets.astype(np.float64).ravel(),
        scene.scales.astype(np.float64).ravel(),
        scene.rotations.astype(np.float64).ravel(),
        scene.opacities.astype(np.float64).ravel(),
        scene.colors.astype(np.float64).ravel(),
        scene.lod_bias.ravel(),
    ])


def apply_params(scene: OctreeScene, vec: np.ndarray) -> None:
    m, k = scene.anchor_count, scene.children_per_anchor
    sizes = [m * k * 3, m * k * 3, m * k * 4, m * k, m * k * 3, m]
    if len(vec) != sum(sizes):
        raise SceneError("parameter vector length mismatch")
    pos = 0
    parts = []
    for s in sizes:
        parts.append(vec[pos:pos + s])
        pos += s
    scene.offsets = parts[0].reshape(m, k, 3).astype(np.float32)
    scene.scales = parts[1].reshape(m, k, 3).astype(np.float32)
    scene.rotations = parts[2].reshape(m, k, 4).astype(np.float32)
    scene.opacities = parts[3].reshape(m, k).astype(np.float32)
    scene.colors = parts[4].reshape(m, k, 3).astype(np.float32)
    scene.lod_bias = parts[5].astype(np.float64).copy()


def grads_vector(grads: ParamGrads) -> np.ndarray:
    return np.concatenate([
        grads.offsets.ravel(), grads.scales.ravel(), grads.rotations.ravel(),
        grads.opacities.ravel(), grads.colors.ravel(), grads.lod_bias.ravel(),
    ])


def finite_difference_oracle(scene: OctreeScene, camera: Camera,
                             target: np.ndarray, param_index: int, h: float,
                             loss_cfg: LossConfig | None = None,
                             max_level: int | None = None) -> float:
    """Central-difference derivative of the training loss for one parameter.

    Child attributes are float32 in storage, so the divisor is the realized
    spacing between the two perturbed values, not the nominal 2h.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = pack_params(scene)
    losses = []
    realized = []
    for sign in (+1.0, -1.0):
        vec = base.copy()
        vec[param_index] += sign * h
        probe = scene.copy()
        apply_params(probe, vec)
        realized.append(pack_params(probe)[param_index])
        losses.append(training_loss(probe, camera, target, loss_cfg, max_level))
    denom = realized[0] - realized[1]
    if denom == 0.0:
        denom = 2.0 * h
    return (losses[0] - losses[1]) / denom
