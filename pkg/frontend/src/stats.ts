/** Rolling client-side measurements for the overlay charts. */

export interface StripSample {
  distance: number;
  fps: number;
}

export class RollingSeries {
  private samples: StripSample[] = [];

  constructor(private capacity: number = 240) {
    if (capacity < 1) throw new Error("capacity must be positive");
  }

  push(sample: StripSample): void {
    this.samples.push(sample);
    if (this.samples.length > this.capacity) {
      this.samples.splice(0, this.samples.length - this.capacity);
    }
  }

  values(): readonly StripSample[] {
    return this.samples;
  }

  clear(): void {
    this.samples = [];
  }
}

/** Frames-per-second from arrival timestamps (ms), averaged over a short
 * window; the clock is injectable for tests. */
export class FpsEstimator {
  private stamps: number[] = [];

  constructor(private window: number = 12,
              private now: () => number = () => performance.now()) {}

  mark(): number | null {
    const t = this.now();
    this.stamps.push(t);
    if (this.stamps.length > this.window) {
      this.stamps.splice(0, this.stamps.length - this.window);
    }
    if (this.stamps.length < 2) return null;
    const span = this.stamps[this.stamps.length - 1] - this.stamps[0];
    if (span <= 0) return null;
    return 1000 * (this.stamps.length - 1) / span;
  }

  reset(): void {
    this.stamps = [];
  }
}
