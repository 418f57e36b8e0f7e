/** The steering loop: at most one frame request in flight; while waiting,
 * only the latest requested pose is kept, and it goes out the moment the
 * previous frame (or an error reply) arrives. */

import { CameraMessage } from "./protocol.js";

export class FrameLoop {
  private inFlight = false;
  private pending: CameraMessage | null = null;
  private sent = 0;

  constructor(private sendRaw: (json: string) => void) {}

  get busy(): boolean {
    return this.inFlight;
  }

  get sentCount(): number {
    return this.sent;
  }

  /** Ask for a frame at this pose; coalesces to the latest while busy. */
  request(msg: CameraMessage): void {
    if (this.inFlight) {
      this.pending = msg;
      return;
    }
    this.inFlight = true;
    this.sent += 1;
    this.sendRaw(JSON.stringify(msg));
  }

  /** Call when a reply (frame or error) lands; flushes a pending pose. */
  completed(): void {
    this.inFlight = false;
    if (this.pending !== null) {
      const next = this.pending;
      this.pending = null;
      this.request(next);
    }
  }

  reset(): void {
    this.inFlight = false;
    this.pending = null;
  }
}
