/** Wire protocol of the render service: JSON camera messages out, one
 * binary frame back per request (16-byte header, PNG bytes, stats JSON).
 * All header integers are little-endian. */

export interface SceneMeta {
  levels: number;
  epsilon: number;
  d_min_hat: number;
  d_max_hat: number;
  children_per_anchor: number;
  anchor_count: number;
  anchors_per_level: number[];
  bbox_min: [number, number, number];
  bbox_max: [number, number, number];
  centroid: [number, number, number];
}

export interface FrameStats {
  lstar: number;
  lhat: number;
  counts_per_level: number[];
  primitive_count: number;
  render_ms: number;
}

export interface ParsedFrame {
  width: number;
  height: number;
  png: Uint8Array;
  stats: FrameStats;
}

export interface CameraMessage {
  type: "camera";
  position: [number, number, number];
  quaternion_wxyz: [number, number, number, number];
  fx: number;
  fy: number;
  width: number;
  height: number;
  lod_override: number | null;
}

const MAGIC = "FRM0";
const HEADER_BYTES = 16;

export function parseFrame(buf: ArrayBuffer): ParsedFrame {
  if (buf.byteLength < HEADER_BYTES) {
    throw new Error(`frame too short: ${buf.byteLength} bytes`);
  }
  const view = new DataView(buf);
  const magic = String.fromCharCode(
    view.getUint8(0), view.getUint8(1), view.getUint8(2), view.getUint8(3));
  if (magic !== MAGIC) {
    throw new Error(`bad frame magic ${JSON.stringify(magic)}`);
  }
  const width = view.getUint32(4, true);
  const height = view.getUint32(8, true);
  const statsLen = view.getUint32(12, true);
  const pngLen = buf.byteLength - HEADER_BYTES - statsLen;
  if (pngLen < 0) {
    throw new Error(`stats length ${statsLen} exceeds frame payload`);
  }
  const png = new Uint8Array(buf, HEADER_BYTES, pngLen);
  const statsText = new TextDecoder().decode(
    new Uint8Array(buf, HEADER_BYTES + pngLen, statsLen));
  const stats = JSON.parse(statsText) as FrameStats;
  return { width, height, png, stats };
}

export function encodeFrame(frame: ParsedFrame): ArrayBuffer {
  // test helper mirroring the server's layout
  const statsBytes = new TextEncoder().encode(JSON.stringify(frame.stats));
  const buf = new ArrayBuffer(HEADER_BYTES + frame.png.length + statsBytes.length);
  const view = new DataView(buf);
  for (let i = 0; i < 4; i++) view.setUint8(i, MAGIC.charCodeAt(i));
  view.setUint32(4, frame.width, true);
  view.setUint32(8, frame.height, true);
  view.setUint32(12, statsBytes.length, true);
  new Uint8Array(buf, HEADER_BYTES).set(frame.png);
  new Uint8Array(buf, HEADER_BYTES + frame.png.length).set(statsBytes);
  return buf;
}

export function isErrorReply(text: string): string | null {
  try {
    const parsed = JSON.parse(text);
    if (parsed && parsed.type === "error") {
      return String(parsed.message ?? "unknown server error");
    }
  } catch {
    return `unparseable server reply: ${text.slice(0, 80)}`;
  }
  return null;
}
