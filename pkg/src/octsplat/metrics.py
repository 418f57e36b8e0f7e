"""Image-quality and efficiency metrics.

SSIM uses the common 11x11 Gaussian window, sigma 1.5, C1=0.01^2,
C2=0.03^2 on data range 1.0, computed per channel with zero-padded
same-size filtering, then averaged.
"""

from __future__ import annotations

import csv
import math
import time

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

PSNR_IDENTICAL = math.inf


class MetricError(ValueError):
    pass


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB; identical images report +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def filter2d_same(img: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    """Separable zero-padded same-size filtering of a single channel."""
    taps = len(kernel1d)
    half = taps // 2
    out = np.zeros_like(img)
    padded = np.pad(img, ((half, half), (0, 0)))
    for t in range(taps):
        out += kernel1d[t] * padded[t:t + img.shape[0], :]
    tmp = out
    out = np.zeros_like(img)
    padded = np.pad(tmp, ((0, 0), (half, half)))
    for t in range(taps):
        out += kernel1d[t] * padded[:, t:t + img.shape[1]]
    return out


def ssim_terms(x: np.ndarray, y: np.ndarray, kernel1d: np.ndarray | None = None) -> dict:
    """Per-pixel SSIM map and the intermediates its gradient needs."""
    k = gaussian_kernel_1d() if kernel1d is None else kernel1d
    mu_x = filter2d_same(x, k)
    mu_y = filter2d_same(y, k)
    sx = filter2d_same(x * x, k) - mu_x**2
    sy = filter2d_same(y * y, k) - mu_y**2
    sxy = filter2d_same(x * y, k) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = sx + sy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return {"mu_x": mu_x, "mu_y": mu_y, "a1": a1, "a2": a2, "b1": b1, "b2": b2, "s": s}


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, per channel then averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise MetricError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = gaussian_kernel_1d()
    vals = [float(np.mean(ssim_terms(a[:, :, c], b[:, :, c], kernel)["s"]))
            for c in range(a.shape[2])]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# efficiency statistics


def view_stats(stats) -> dict:
    """Normalize one render's stats into the reported dictionary."""
    return {
        "num_gs": int(stats.num_primitives),
        "render_ms": float(stats.render_ms),
        "counts_per_level": list(stats.counts_per_level),
    }


def fps_from_ms(ms_values) -> float:
    ms_values = list(ms_values)
    if not ms_values:
        raise MetricError("empty trajectory")
    mean_ms = float(np.mean(ms_values))
    if mean_ms <= 0:
        raise MetricError("non-positive frame time")
    return 1000.0 / mean_ms


def measure_fps(render_fn, runs: int = 5, warmup: int = 1) -> float:
    """FPS from the mean wall-clock of `runs` warm invocations (runs >= 5)."""
    if runs < 5:
        raise MetricError("need at least 5 warm runs")
    for _ in range(warmup):
        render_fn()
    ms = []
    for _ in range(runs):
        t0 = time.perf_counter()
        render_fn()
        ms.append((time.perf_counter() - t0) * 1000.0)
    return fps_from_ms(ms)


def write_trajectory_csv(path, rows: list[dict]) -> None:
    """Delimited per-frame stats: frame, distance, num_gs, render_ms, psnr."""
    fields = ["frame", "distance", "num_gs", "render_ms", "psnr"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            p = out.get("psnr")
            if p is None or (isinstance(p, float) and math.isnan(p)):
                out["psnr"] = ""
            writer.writerow({f: out.get(f, "") for f in fields})
