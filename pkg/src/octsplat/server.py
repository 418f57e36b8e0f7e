"""Render service: HTTP /meta plus a WebSocket /stream endpoint.

One frame per request: the client sends a JSON camera message and receives
a single binary reply laid out as

    16-byte header: magic "FRM0", width u32, height u32, stats length u32
    PNG bytes of the rendered frame
    stats JSON: {lstar, lhat, counts_per_level, primitive_count, render_ms}

All integers are little-endian. Malformed messages get a JSON error reply
on the open socket. The scene is immutable, so concurrent connections
render freely.
"""

from __future__ import annotations

import asyncio
import io
import json
import struct

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from .rasterizer import render_view
from .scene import Camera, OctreeScene

FRAME_MAGIC = b"FRM0"
_HEADER = struct.Struct("<4sIII")


def scene_meta(scene: OctreeScene) -> dict:
    centers = scene.voxel_centers
    if scene.anchor_count:
        bbox_min = centers.min(axis=0).tolist()
        bbox_max = centers.max(axis=0).tolist()
    else:
        bbox_min = bbox_max = [0.0, 0.0, 0.0]
    return {
        "levels": scene.num_levels,
        "epsilon": scene.epsilon,
        "d_min_hat": scene.d_min_hat,
        "d_max_hat": scene.d_max_hat,
        "children_per_anchor": scene.children_per_anchor,
        "anchor_count": scene.anchor_count,
        "anchors_per_level": scene.counts_per_level(),
        "bbox_min": bbox_min,
        "bbox_max": bbox_max,
        "centroid": scene.centroid().tolist(),
    }


def camera_from_message(msg: dict) -> Camera:
    for f in ("position", "quaternion_wxyz", "fx", "fy", "width", "height"):
        if f not in msg:
            raise ValueError(f"missing field {f!r}")
    width = int(msg["width"])
    height = int(msg["height"])
    cam = Camera(
        position=np.asarray(msg["position"], dtype=np.float64),
        rotation=np.asarray(msg["quaternion_wxyz"], dtype=np.float64),
        fx=float(msg["fx"]), fy=float(msg["fy"]),
        cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
    )
    cam.validate()
    n = np.linalg.norm(cam.rotation)
    if n == 0:
        raise ValueError("zero quaternion")
    cam.rotation = cam.rotation / n
    return cam


def render_frame_message(scene: OctreeScene, msg: dict) -> bytes:
    cam = camera_from_message(msg)
    override = msg.get("lod_override")
    if override is not None:
        override = int(np.clip(int(override), 0, scene.num_levels - 1))
    fb, stats = render_view(scene, cam, mode="inference", lod_override=override)
    buf = io.BytesIO()
    png = np.rint(np.clip(fb.color, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(png, mode="RGB").save(buf, format="PNG")
    png_bytes = buf.getvalue()
    stats_bytes = json.dumps({
        "lstar": stats.lstar,
        "lhat": stats.lhat,
        "counts_per_level": stats.counts_per_level,
        "primitive_count": stats.num_primitives,
        "render_ms": stats.render_ms,
    }).encode("utf-8")
    header = _HEADER.pack(FRAME_MAGIC, cam.width, cam.height, len(stats_bytes))
    return header + png_bytes + stats_bytes


def create_app(scene: OctreeScene) -> FastAPI:
    app = FastAPI(title="octsplat render service")
    # the viewer is served as a static page from elsewhere
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["GET"])

    @app.get("/meta")
    def meta() -> dict:
        return scene_meta(scene)

    @app.websocket("/stream")
    async def stream(ws: WebSocket) -> None:
        await ws.accept()
        try:
            while True:
                event = await ws.receive()
                if event.get("type") == "websocket.disconnect":
                    return
                raw = event.get("text")
                try:
                    if raw is None:
                        raise ValueError("expected a JSON text message")
                    msg = json.loads(raw)
                    if not isinstance(msg, dict) or msg.get("type") != "camera":
                        raise ValueError("expected a {'type': 'camera', ...} message")
                    reply = await asyncio.to_thread(render_frame_message, scene, msg)
                except (ValueError, TypeError, KeyError) as exc:
                    await ws.send_text(json.dumps({"type": "error", "message": str(exc)}))
                    continue
                await ws.send_bytes(reply)
        except WebSocketDisconnect:
            return

    return app
