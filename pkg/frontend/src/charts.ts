/** Overlay charts: per-level count bars and the FPS-vs-distance strip.
 * Geometry is computed by pure helpers so it stays testable headless. */

import type { StripSample } from "./stats.js";

export interface BarRect {
  x: number;
  y: number;
  w: number;
  h: number;
  level: number;
  count: number;
}

export function barLayout(counts: number[], width: number, height: number,
                          pad = 2): BarRect[] {
  const n = counts.length;
  if (n === 0) return [];
  const peak = Math.max(1, ...counts);
  const slot = width / n;
  return counts.map((count, level) => {
    const h = Math.round((height - 2 * pad) * (count / peak));
    return {
      x: Math.round(level * slot) + pad,
      y: height - pad - h,
      w: Math.max(1, Math.round(slot) - 2 * pad),
      h,
      level,
      count,
    };
  });
}

export interface StripPoint {
  x: number;
  y: number;
}

/** Map (distance, fps) samples onto the strip; x spans the distance range
 * seen so far, y is fps with 0 at the bottom. */
export function stripPath(samples: readonly StripSample[], width: number,
                          height: number, maxFps?: number): StripPoint[] {
  if (samples.length === 0) return [];
  const dLo = Math.min(...samples.map((s) => s.distance));
  const dHi = Math.max(...samples.map((s) => s.distance));
  const fpsTop = maxFps ?? Math.max(1, ...samples.map((s) => s.fps));
  const span = dHi - dLo;
  return samples.map((s) => ({
    x: span === 0 ? width / 2 : ((s.distance - dLo) / span) * width,
    y: height - Math.min(1, s.fps / fpsTop) * height,
  }));
}

const BAR_COLORS = ["#4e79a7", "#59a14f", "#f28e2b", "#e15759",
                    "#b07aa1", "#76b7b2", "#edc948", "#9c755f"];

export function drawBars(ctx: CanvasRenderingContext2D, counts: number[],
                         width: number, height: number): void {
  ctx.clearRect(0, 0, width, height);
  for (const bar of barLayout(counts, width, height)) {
    ctx.fillStyle = BAR_COLORS[bar.level % BAR_COLORS.length];
    ctx.fillRect(bar.x, bar.y, bar.w, bar.h);
    ctx.fillStyle = "#ccc";
    ctx.font = "10px sans-serif";
    ctx.textAlign = "center";
    ctx.fillText(String(bar.count), bar.x + bar.w / 2, Math.max(10, bar.y - 2));
  }
}

export function drawStrip(ctx: CanvasRenderingContext2D,
                          samples: readonly StripSample[],
                          width: number, height: number): void {
  ctx.clearRect(0, 0, width, height);
  const pts = stripPath(samples, width, height);
  if (pts.length < 2) return;
  ctx.strokeStyle = "#f28e2b";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  ctx.moveTo(pts[0].x, pts[0].y);
  for (const p of pts.slice(1)) ctx.lineTo(p.x, p.y);
  ctx.stroke();
}
