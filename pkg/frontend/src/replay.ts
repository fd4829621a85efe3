/**
 * Session replay: drive the reducer from a recorded rollout log.
 *
 * Rollout logs are newline-delimited JSON records; the records with
 * `record == "message"` carry the wire traffic the console would have
 * seen live. Replaying them is how the console is tested headless and how
 * recorded sessions can be reviewed.
 */

import { parseMessage, WireMessage } from "./protocol.js";
import { ConsoleState, initialState, reduce } from "./state.js";

export interface ReplayResult {
  state: ConsoleState;
  messages: WireMessage[];
}

/** Wire messages of a rollout log, in record order. */
export function messagesFromLog(lines: string[]): WireMessage[] {
  const out: WireMessage[] = [];
  for (const line of lines) {
    if (!line.trim()) continue;
    const record = JSON.parse(line);
    if (record.record === "message") {
      out.push(parseMessage(JSON.stringify(record.data)));
    }
  }
  return out;
}

export function replaySession(lines: string[]): ReplayResult {
  const state = initialState();
  state.connection = "connected";
  const messages = messagesFromLog(lines);
  for (const msg of messages) {
    reduce(state, msg);
  }
  return { state, messages };
}
