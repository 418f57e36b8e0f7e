import { describe, expect, it } from "vitest";

import { encodeFrame, isErrorReply, parseFrame, ParsedFrame } from "../src/protocol.js";

const stats = {
  lstar: 1.75,
  lhat: 2,
  counts_per_level: [1, 8, 12],
  primitive_count: 84,
  render_ms: 12.5,
};

function sampleFrame(): ParsedFrame {
  return { width: 64, height: 48, png: new Uint8Array([137, 80, 78, 71, 1, 2, 3]), stats };
}

describe("parseFrame", () => {
  it("round-trips the binary layout", () => {
    const buf = encodeFrame(sampleFrame());
    const frame = parseFrame(buf);
    expect(frame.width).toBe(64);
    expect(frame.height).toBe(48);
    expect(Array.from(frame.png)).toEqual([137, 80, 78, 71, 1, 2, 3]);
    expect(frame.stats).toEqual(stats);
  });

  it("reads little-endian header fields", () => {
    const buf = encodeFrame(sampleFrame());
    const bytes = new Uint8Array(buf);
    // width 64 = 0x40 at the low byte of offset 4
    expect(bytes[4]).toBe(64);
    expect(bytes[5]).toBe(0);
  });

  it("rejects a bad magic", () => {
    const buf = encodeFrame(sampleFrame());
    new Uint8Array(buf)[0] = 88;
    expect(() => parseFrame(buf)).toThrow(/magic/);
  });

  it("rejects truncated buffers", () => {
    expect(() => parseFrame(new ArrayBuffer(7))).toThrow(/short/);
  });

  it("rejects stats length past the payload", () => {
    const buf = encodeFrame(sampleFrame());
    new DataView(buf).setUint32(12, 10_000, true);
    expect(() => parseFrame(buf)).toThrow(/stats length/);
  });
});

describe("isErrorReply", () => {
  it("extracts server error messages", () => {
    expect(isErrorReply(JSON.stringify({ type: "error", message: "bad camera" })))
      .toBe("bad camera");
  });

  it("ignores non-error text", () => {
    expect(isErrorReply(JSON.stringify({ type: "other" }))).toBeNull();
  });

  it("flags unparseable replies", () => {
    expect(isErrorReply("{nope")).toMatch(/unparseable/);
  });
});
