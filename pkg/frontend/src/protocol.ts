/**
 * Wire protocol types and framing (see protocol.md at the repo root).
 *
 * Messages are newline-delimited JSON; over the WebSocket each text frame
 * carries exactly one message, over raw streams the FrameBuffer re-frames.
 */

export const SCHEMA_VERSION = 1;

export interface ChunkMsg {
  v: number;
  seq: number;
  type: "chunk";
  chunk_id: number;
  waypoints: number[][];
  durations: number[];
  origin_time: number;
  prefix_len: number;
}

export interface FeedbackMsg {
  v: number;
  seq: number;
  type: "feedback";
  timestamp: number;
  reported_q: number[];
  executed_chunk_id: number;
  progress: number;
}

export interface ThrottleMsg {
  v: number;
  seq: number;
  type: "throttle";
  timestamp: number;
  operator_input: number;
}

export type EventKind = "failure" | "intervention" | "episode_end" | "scale";

export interface EventMsg {
  v: number;
  seq: number;
  type: "event";
  kind: EventKind;
  timestamp: number;
  payload: Record<string, unknown>;
}

export type WireMessage = ChunkMsg | FeedbackMsg | ThrottleMsg | EventMsg;

const EVENT_KINDS: EventKind[] = ["failure", "intervention", "episode_end", "scale"];

export class ProtocolError extends Error {}

export function parseMessage(line: string): WireMessage {
  let data: any;
  try {
    data = JSON.parse(line);
  } catch (err) {
    throw new ProtocolError(`invalid JSON near ${line.slice(0, 60)}`);
  }
  if (typeof data !== "object" || data === null) {
    throw new ProtocolError("wire message must be an object");
  }
  if (data.v !== SCHEMA_VERSION) {
    throw new ProtocolError(`unsupported schema version: ${data.v}`);
  }
  switch (data.type) {
    case "chunk":
    case "feedback":
    case "throttle":
      return data as WireMessage;
    case "event":
      if (!EVENT_KINDS.includes(data.kind)) {
        throw new ProtocolError(`unknown event kind: ${data.kind}`);
      }
      return data as EventMsg;
    default:
      throw new ProtocolError(`unknown message type: ${data.type}`);
  }
}

export function serializeMessage(msg: WireMessage): string {
  return JSON.stringify(msg) + "\n";
}

export function makeThrottle(seq: number, timestamp: number, input: number): ThrottleMsg {
  const clamped = Math.max(-1, Math.min(1, input));
  return { v: SCHEMA_VERSION, seq, type: "throttle", timestamp, operator_input: clamped };
}

export function makeIntervention(seq: number, timestamp: number): EventMsg {
  return { v: SCHEMA_VERSION, seq, type: "event", kind: "intervention", timestamp, payload: {} };
}

/** Re-frames a byte/character stream into complete newline-terminated lines. */
export class FrameBuffer {
  private pending = "";

  push(text: string): string[] {
    this.pending += text;
    const parts = this.pending.split("\n");
    this.pending = parts.pop() ?? "";
    return parts.filter((p) => p.trim().length > 0);
  }
}

/**
 * Reference throttle arithmetic, mirroring the server: the input names a
 * target pace at most maxRel away from the model's current scale.
 */
export function applyThrottleOracle(
  modelScale: number,
  input: number,
  maxRel: number,
  sMin = 0.5,
  sCap = 3.0,
): number {
  const clamped = Math.max(-1, Math.min(1, input));
  const raw = modelScale * Math.pow(maxRel, clamped);
  return Math.min(sCap, Math.max(sMin, raw));
}
