/** DOM wiring: connect to a render service, steer the camera with the
 * pointer, and keep the overlays in sync with the server's stats. */

import { cameraPose, defaultOrbit, dolly, orbit, OrbitState, pan } from "./camera.js";
import { drawBars, drawStrip } from "./charts.js";
import { CameraMessage, FrameStats, isErrorReply, parseFrame, SceneMeta } from "./protocol.js";
import { FrameLoop } from "./session.js";
import { FpsEstimator, RollingSeries } from "./stats.js";

const FOV_Y = (50 * Math.PI) / 180;
const RENDER_SIZE = 256;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("view");
const barsCanvas = el<HTMLCanvasElement>("level-bars");
const stripCanvas = el<HTMLCanvasElement>("fps-strip");
const banner = el<HTMLDivElement>("banner");
const serverInput = el<HTMLInputElement>("server");
const connectBtn = el<HTMLButtonElement>("connect");
const lodSlider = el<HTMLInputElement>("lod-slider");
const lodAuto = el<HTMLInputElement>("lod-auto");
const lodLabel = el<HTMLSpanElement>("lod-label");
const statsText = el<HTMLDivElement>("stats-text");
const toast = el<HTMLDivElement>("toast");

canvas.width = RENDER_SIZE;
canvas.height = RENDER_SIZE;
const ctx = canvas.getContext("2d")!;
const barsCtx = barsCanvas.getContext("2d")!;
const stripCtx = stripCanvas.getContext("2d")!;

let ws: WebSocket | null = null;
let meta: SceneMeta | null = null;
let state: OrbitState | null = null;
let loop: FrameLoop | null = null;
const series = new RollingSeries(300);
const fps = new FpsEstimator();

function showBanner(message: string): void {
  banner.textContent = message + " ";
  const retry = document.createElement("button");
  retry.textContent = "retry";
  retry.onclick = () => connect();
  banner.appendChild(retry);
  banner.style.display = "block";
}

function hideBanner(): void {
  banner.style.display = "none";
}

function showToast(message: string): void {
  toast.textContent = message;
  toast.style.display = "block";
  setTimeout(() => (toast.style.display = "none"), 4000);
}

function lodOverride(): number | null {
  return lodAuto.checked ? null : Number(lodSlider.value);
}

function currentMessage(): CameraMessage {
  if (!state) throw new Error("no camera yet");
  const pose = cameraPose(state);
  const f = RENDER_SIZE / 2 / Math.tan(FOV_Y / 2);
  return {
    type: "camera",
    position: pose.position,
    quaternion_wxyz: pose.quaternion,
    fx: f,
    fy: f,
    width: RENDER_SIZE,
    height: RENDER_SIZE,
    lod_override: lodOverride(),
  };
}

function requestFrame(): void {
  if (loop && ws && ws.readyState === WebSocket.OPEN) {
    loop.request(currentMessage());
  }
}

function updateOverlay(stats: FrameStats): void {
  // stats are shown verbatim from the server's reply
  statsText.textContent =
    `L* ${stats.lstar.toFixed(3)}   L̂ ${stats.lhat}   ` +
    `primitives ${stats.primitive_count}   server ${stats.render_ms.toFixed(1)} ms`;
  drawBars(barsCtx, stats.counts_per_level, barsCanvas.width, barsCanvas.height);
  const rate = fps.mark();
  if (rate !== null && state) {
    series.push({ distance: state.distance, fps: rate });
    drawStrip(stripCtx, series.values(), stripCanvas.width, stripCanvas.height);
  }
}

async function presentFrame(buf: ArrayBuffer): Promise<void> {
  const frame = parseFrame(buf);
  const bitmap = await createImageBitmap(new Blob([frame.png.slice()], { type: "image/png" }));
  ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
  updateOverlay(frame.stats);
}

function configureLodControls(levels: number): void {
  lodSlider.min = "0";
  lodSlider.max = String(levels - 1);
  lodSlider.value = String(levels - 1);
  lodLabel.textContent = lodAuto.checked ? "auto" : lodSlider.value;
}

async function connect(): Promise<void> {
  hideBanner();
  ws?.close();
  const base = serverInput.value.replace(/\/+$/, "");
  try {
    const resp = await fetch(`${base}/meta`);
    if (!resp.ok) throw new Error(`GET /meta: HTTP ${resp.status}`);
    meta = (await resp.json()) as SceneMeta;
  } catch (err) {
    showBanner(`cannot reach server: ${err}`);
    return;
  }
  configureLodControls(meta.levels);
  state = defaultOrbit(meta, FOV_Y);
  series.clear();
  fps.reset();

  const wsUrl = base.replace(/^http/, "ws") + "/stream";
  const socket = new WebSocket(wsUrl);
  socket.binaryType = "arraybuffer";
  ws = socket;
  loop = new FrameLoop((json) => socket.send(json));
  socket.onopen = () => requestFrame();
  socket.onmessage = async (ev: MessageEvent) => {
    if (typeof ev.data === "string") {
      const msg = isErrorReply(ev.data);
      if (msg) showToast(`server: ${msg}`);
      loop?.completed();
      return;
    }
    try {
      await presentFrame(ev.data as ArrayBuffer);
    } catch (err) {
      showToast(`bad frame: ${err}`);
    }
    loop?.completed();
  };
  socket.onerror = () => showBanner("connection failed");
  socket.onclose = () => {
    if (ws === socket) showBanner("connection closed");
  };
}

// ---------------------------------------------------------------------------
// input events

let dragging = false;
let panning = false;
let lastX = 0;
let lastY = 0;

canvas.addEventListener("pointerdown", (ev) => {
  dragging = true;
  panning = ev.shiftKey || ev.button === 2;
  lastX = ev.clientX;
  lastY = ev.clientY;
  canvas.setPointerCapture(ev.pointerId);
});

canvas.addEventListener("pointermove", (ev) => {
  if (!dragging || !state) return;
  const dx = ev.clientX - lastX;
  const dy = ev.clientY - lastY;
  lastX = ev.clientX;
  lastY = ev.clientY;
  if (panning) {
    state = pan(state, -dx / canvas.width, -dy / canvas.height);
  } else {
    state = orbit(state, -dx * 0.008, dy * 0.008);
  }
  requestFrame();
});

canvas.addEventListener("pointerup", (ev) => {
  dragging = false;
  canvas.releasePointerCapture(ev.pointerId);
});

canvas.addEventListener("wheel", (ev) => {
  if (!state) return;
  ev.preventDefault();
  state = dolly(state, Math.exp(ev.deltaY * 0.0012));
  requestFrame();
});

canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());

lodSlider.addEventListener("input", () => {
  lodAuto.checked = false;
  lodLabel.textContent = lodSlider.value;
  requestFrame();
});

lodAuto.addEventListener("change", () => {
  lodLabel.textContent = lodAuto.checked ? "auto" : lodSlider.value;
  requestFrame();
});

connectBtn.addEventListener("click", () => connect());

connect();
