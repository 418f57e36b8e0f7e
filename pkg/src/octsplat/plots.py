"""Report figures rendered next to the delimited stats output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_trajectory_stats(rows: list[dict], out_path) -> None:
    """Primitive-count and frame-time curves against viewing distance."""
    dist = [r["distance"] for r in rows]
    gs = [r["num_gs"] for r in rows]
    ms = [r["render_ms"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(dist, gs, marker=".", color="tab:blue")
    ax1.set_ylabel("primitives per view")
    ax1.grid(alpha=0.3)
    ax2.plot(dist, ms, marker=".", color="tab:orange")
    ax2.set_ylabel("render time (ms)")
    ax2.set_xlabel("viewing distance")
    ax2.grid(alpha=0.3)
    fig.suptitle("Rendering cost along the trajectory")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_eval_quality(rows: list[dict], out_path) -> None:
    """Per-view PSNR bars for the evaluate command."""
    frames = [r["frame"] for r in rows]
    psnrs = [r["psnr"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(frames, psnrs, color="tab:green")
    ax.set_xlabel("view")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
