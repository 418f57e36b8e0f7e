"""Command-line entry point: build, train, render, evaluate, serve.

Exit codes: 0 on success, 2 on any configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import builder, metrics, sceneio
from .gradients import LossConfig
from .rasterizer import render_view
from .scene import SceneError
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_ERROR = 2


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_ERROR


def load_dataset(directory: str):
    """Read <dir>/cameras.json and the PNG named by each record's 'image'."""
    cams_path = os.path.join(directory, "cameras.json")
    records = sceneio.load_camera_records(cams_path)
    dataset = []
    for i, rec in enumerate(records):
        cam = sceneio.camera_from_record(rec, i)
        if "image" not in rec:
            raise sceneio.CameraFormatError(f"camera {i}: missing field 'image'")
        img = sceneio.read_image(os.path.join(directory, rec["image"]))
        dataset.append((cam, img))
    return dataset


# ---------------------------------------------------------------------------
# subcommands


def cmd_build(args) -> int:
    try:
        points, _ = sceneio.load_ply_points(args.points)
        cameras = sceneio.load_cameras(args.cameras)
        cfg = builder.BuildConfig(coarse_divisor=args.coarse_divisor,
                                  max_levels=args.max_levels,
                                  children_per_anchor=args.children)
        scene = builder.build(points, cameras, cfg)
    except (sceneio.FileFormatError, SceneError, OSError) as exc:
        return _fail(str(exc))
    sceneio.save_scene(args.out, scene)
    print(f"levels K = {scene.num_levels}")
    print(f"base voxel size = {scene.epsilon:.6g}")
    print(f"depth range = ({scene.d_min_hat:.6g}, {scene.d_max_hat:.6g})")
    for level, count in enumerate(scene.counts_per_level()):
        print(f"level {level}: {count} anchors")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        scene = sceneio.load_scene(args.scene)
        dataset = load_dataset(args.dataset)
        cfg = TrainConfig(
            tau_g=args.tau_g, beta=args.beta, stat_interval=args.stat_interval,
            n0=args.n0, omega=args.omega, initial_level=args.initial_level,
            stage1_iters=args.stage1_iters, stage2_iters=args.stage2_iters,
            prune_opacity=args.prune_opacity,
        )
        if args.iters is not None:
            if args.iters < 0:
                raise SceneError("--iters must be non-negative")
            cfg.stage1_iters = min(cfg.stage1_iters, args.iters)
            cfg.stage2_iters = args.iters - cfg.stage1_iters
        cfg.validate()
        cfg.resolved_initial_level(scene.num_levels)
    except (sceneio.FileFormatError, SceneError, OSError) as exc:
        return _fail(str(exc))
    scene, log = train(scene, dataset, cfg, seed=args.seed)
    sceneio.save_scene(args.out, scene)
    if args.log:
        sceneio.write_ndjson(args.log, log)
        print(f"wrote training log {args.log}")
    print(f"trained {cfg.stage1_iters + cfg.stage2_iters} iterations; "
          f"{scene.anchor_count} anchors; wrote {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        scene = sceneio.load_scene(args.scene)
        cameras = sceneio.load_cameras(args.trajectory)
        if not cameras:
            raise SceneError("empty trajectory")
    except (sceneio.FileFormatError, SceneError, OSError) as exc:
        return _fail(str(exc))
    os.makedirs(args.out, exist_ok=True)
    mode = "inference" if args.lod == "on" else "all"
    centroid = scene.centroid()
    rows = []
    for i, cam in enumerate(cameras):
        fb, stats = render_view(scene, cam, mode=mode, workers=args.workers)
        frame_path = os.path.join(args.out, f"frame_{i:04d}.png")
        sceneio.write_image(frame_path, fb.color)
        row = {
            "frame": i,
            "distance": float(np.linalg.norm(cam.position - centroid)),
            "num_gs": stats.num_primitives,
            "render_ms": stats.render_ms,
            "psnr": None,
        }
        if args.psnr_ref:
            ref = sceneio.read_image(os.path.join(args.psnr_ref, f"frame_{i:04d}.png"))
            row["psnr"] = metrics.psnr(fb.color, ref)
        rows.append(row)
    csv_path = os.path.join(args.out, "stats.csv")
    metrics.write_trajectory_csv(csv_path, rows)
    print(f"wrote {len(rows)} frames and {csv_path}")
    if args.plot:
        from .plots import plot_trajectory_stats
        fig_path = os.path.join(args.out, "trajectory_stats.png")
        plot_trajectory_stats(rows, fig_path)
        print(f"wrote {fig_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        scene = sceneio.load_scene(args.scene)
        dataset = load_dataset(args.dataset)
    except (sceneio.FileFormatError, SceneError, OSError) as exc:
        return _fail(str(exc))
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, (cam, target) in enumerate(dataset):
        fb, stats = render_view(scene, cam, mode=args.mode, workers=args.workers)
        rows.append({
            "frame": i,
            "psnr": metrics.psnr(fb.color, target),
            "ssim": metrics.ssim(fb.color, target),
            "num_gs": stats.num_primitives,
            "render_ms": stats.render_ms,
        })
    csv_path = os.path.join(args.out, "eval.csv")
    import csv as _csv
    with open(csv_path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["frame", "psnr", "ssim", "num_gs", "render_ms"])
        writer.writeheader()
        writer.writerows(rows)
    finite = [r["psnr"] for r in rows if math.isfinite(r["psnr"])]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    print(f"views: {len(rows)}  mean PSNR: {mean_psnr:.2f} dB  mean SSIM: {mean_ssim:.4f}")
    print(f"wrote {csv_path}")
    if args.plot:
        from .plots import plot_eval_quality
        fig_path = os.path.join(args.out, "eval_psnr.png")
        plot_eval_quality([r for r in rows if math.isfinite(r["psnr"])], fig_path)
        print(f"wrote {fig_path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    try:
        scene = sceneio.load_scene(args.scene)
    except (sceneio.FileFormatError, SceneError, OSError) as exc:
        return _fail(str(exc))
    from .server import create_app
    import uvicorn
    app = create_app(scene)
    print(f"serving {args.scene} on {args.host}:{args.port} "
          f"(GET /meta, WebSocket /stream)")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octsplat",
                                     description="LOD Gaussian splatting engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an anchor octree from a point cloud")
    p.add_argument("--points", required=True, help="PLY point cloud")
    p.add_argument("--cameras", required=True, help="camera JSON array")
    p.add_argument("--out", default="scene.octs")
    p.add_argument("--coarse-divisor", type=int, default=4)
    p.add_argument("--max-levels", type=int, default=None)
    p.add_argument("--children", type=int, default=4,
                   help="children per anchor")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="two-stage training on a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--dataset", required=True,
                   help="directory with cameras.json (+ 'image' fields) and PNGs")
    p.add_argument("--out", default="trained.octs")
    p.add_argument("--log", default=None, help="NDJSON training log path")
    p.add_argument("--iters", type=int, default=None,
                   help="override total iterations (stage 1 first)")
    p.add_argument("--stage1-iters", type=int, default=10000)
    p.add_argument("--stage2-iters", type=int, default=30000)
    p.add_argument("--tau-g", type=float, default=0.0002)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--stat-interval", type=int, default=100)
    p.add_argument("--n0", type=int, default=8000)
    p.add_argument("--omega", type=float, default=0.5)
    p.add_argument("--initial-level", type=int, default=None)
    p.add_argument("--prune-opacity", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a camera trajectory")
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectory", required=True, help="camera JSON array")
    p.add_argument("--lod", choices=["on", "off"], default="on")
    p.add_argument("--out", default="renders")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--psnr-ref", default=None,
                   help="directory of reference frame_%%04d.png for the PSNR column")
    p.add_argument("--plot", dest="plot", action="store_true", default=True)
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="PSNR/SSIM against a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="evaluation")
    p.add_argument("--mode", choices=["inference", "train", "all"], default="inference")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", dest="plot", action="store_true", default=True)
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="long-running render service")
    p.add_argument("--scene", required=True)
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    np.random.seed(args.seed)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
