/**
 * Operator input sources -> rate-limited throttle messages.
 *
 * Keyboard (hold-to-speed / hold-to-slow), a continuous slider, and a
 * two-level preset toggle all set the same desired input in [-1, 1]; the
 * emitter sends at most one message per feedback period and always
 * reports a zero input after release. The console only ever originates
 * inputs, never speed values.
 */

import { ThrottleMsg, makeThrottle } from "./protocol.js";

export type SendFn = (msg: ThrottleMsg) => void;
export type Clock = () => number;

export class ThrottleController {
  private desired = 0;
  // absence of messages means zero to the server, so nothing is sent
  // until the operator first moves the input
  private lastSent = 0;
  private lastSentAt = -Infinity;
  private seq = 0;
  private presetFast = false;

  constructor(
    private send: SendFn,
    private now: Clock,
    public minInterval = 0.02,
  ) {}

  get currentInput(): number {
    return this.desired;
  }

  setSlider(value: number): void {
    this.desired = Math.max(-1, Math.min(1, value));
    this.flush();
  }

  keyDown(direction: "fast" | "slow"): void {
    this.desired = direction === "fast" ? 1 : -1;
    this.flush();
  }

  keyUp(): void {
    this.desired = 0;
    this.flush();
  }

  /** Two-level preset: toggles between full throttle and neutral. */
  togglePreset(): void {
    this.presetFast = !this.presetFast;
    this.desired = this.presetFast ? 1 : 0;
    this.flush();
  }

  setFeedbackPeriod(seconds: number): void {
    if (seconds > 0) {
      this.minInterval = seconds;
    }
  }

  /** Emits when the value changed and the rate limit allows it. */
  flush(): void {
    const t = this.now();
    if (this.desired === this.lastSent) {
      return;
    }
    if (t - this.lastSentAt < this.minInterval) {
      return; // tick() retries once the window reopens
    }
    this.seq += 1;
    this.send(makeThrottle(this.seq, t, this.desired));
    this.lastSent = this.desired;
    this.lastSentAt = t;
  }

  /** Call periodically (e.g. per animation frame) to drain pending changes. */
  tick(): void {
    this.flush();
  }
}

/** Debounced intervention button: one event per window regardless of clicks. */
export class InterventionButton {
  private lastFired = -Infinity;
  private seq = 0;

  constructor(
    private send: (seq: number, timestamp: number) => void,
    private now: Clock,
    public debounce = 0.3,
  ) {}

  click(): boolean {
    const t = this.now();
    if (t - this.lastFired < this.debounce) {
      return false;
    }
    this.lastFired = t;
    this.seq += 1;
    this.send(this.seq, t);
    return true;
  }
}
