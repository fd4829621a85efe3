/**
 * Console state and its single reducer.
 *
 * Every message from the bridge flows through reduce(); nothing else
 * mutates ConsoleState. The console never computes speed values itself:
 * model and effective scale are whatever the server last echoed in a
 * "scale" event.
 */

import { WireMessage } from "./protocol.js";

export const MAX_TRACE_POINTS = 2000;

export interface TracePoint {
  t: number;
  value: number;
}

/** Append-only rolling buffer; halves itself by decimation at the cap. */
export class Trace {
  points: TracePoint[] = [];

  push(t: number, value: number): void {
    this.points.push({ t, value });
    if (this.points.length > MAX_TRACE_POINTS) {
      // keep every other point: halves memory, preserves shape
      this.points = this.points.filter((_, i) => i % 2 === 0);
    }
  }

  get last(): TracePoint | undefined {
    return this.points[this.points.length - 1];
  }
}

export interface Marker {
  time: number;
  kind: "failure" | "intervention";
}

export type ConnectionStatus = "disconnected" | "connecting" | "connected";

export interface ConsoleState {
  connection: ConnectionStatus;
  jointVelocity: Trace[];
  executedScale: Trace;
  trackingProgress: Trace;
  modelScale: number | null;
  effectiveScale: number | null;
  throttleEcho: number | null;
  episodeTimer: number;
  lastEpisodeTime: number | null;
  bestEpisodeTime: number | null;
  targetEpisodeTime: number | null;
  markers: Marker[];
  paused: boolean;
  lastFeedback: { t: number; q: number[] } | null;
  feedbackPeriod: number;
}

export function initialState(): ConsoleState {
  return {
    connection: "disconnected",
    jointVelocity: [],
    executedScale: new Trace(),
    trackingProgress: new Trace(),
    modelScale: null,
    effectiveScale: null,
    throttleEcho: null,
    episodeTimer: 0,
    lastEpisodeTime: null,
    bestEpisodeTime: null,
    targetEpisodeTime: null,
    markers: [],
    paused: false,
    lastFeedback: null,
    feedbackPeriod: 0.02,
  };
}

function ensureJointTraces(state: ConsoleState, n: number): void {
  while (state.jointVelocity.length < n) {
    state.jointVelocity.push(new Trace());
  }
}

export function reduce(state: ConsoleState, msg: WireMessage): ConsoleState {
  switch (msg.type) {
    case "feedback": {
      const prev = state.lastFeedback;
      ensureJointTraces(state, msg.reported_q.length);
      if (prev !== null && msg.timestamp > prev.t) {
        const dt = msg.timestamp - prev.t;
        state.feedbackPeriod = dt;
        msg.reported_q.forEach((q, j) => {
          const v = (q - (prev.q[j] ?? q)) / dt;
          state.jointVelocity[j].push(msg.timestamp, v);
        });
      }
      state.trackingProgress.push(msg.timestamp, msg.progress);
      state.lastFeedback = { t: msg.timestamp, q: [...msg.reported_q] };
      if (!state.paused) {
        state.episodeTimer = msg.timestamp;
      }
      break;
    }
    case "event": {
      switch (msg.kind) {
        case "scale": {
          const p = msg.payload as Record<string, number>;
          // echoed by the server; the UI must not derive these locally
          state.modelScale = p.model_scale_head ?? p.model_scale ?? state.modelScale;
          state.effectiveScale =
            p.effective_scale_head ?? p.effective_scale ?? state.effectiveScale;
          state.throttleEcho = p.throttle_input ?? state.throttleEcho;
          state.executedScale.push(msg.timestamp, state.effectiveScale ?? 0);
          break;
        }
        case "failure":
          state.markers.push({ time: msg.timestamp, kind: "failure" });
          break;
        case "intervention":
          state.markers.push({ time: msg.timestamp, kind: "intervention" });
          state.paused = !state.paused;
          break;
        case "episode_end": {
          const p = msg.payload as Record<string, unknown>;
          const wall =
            typeof p.wall_time === "number" ? (p.wall_time as number) : msg.timestamp;
          state.lastEpisodeTime = wall;
          if (state.bestEpisodeTime === null || wall < state.bestEpisodeTime) {
            state.bestEpisodeTime = wall;
          }
          // the daily target: beat the best run by a nudge
          state.targetEpisodeTime = state.bestEpisodeTime * 0.95;
          break;
        }
      }
      break;
    }
    default:
      break; // chunk/throttle traffic is not rendered
  }
  return state;
}
