/**
 * Console entry point: socket wiring, input handlers, render loop.
 */

import { drawTrace } from "./charts.js";
import {
  makeIntervention,
  parseMessage,
  serializeMessage,
  WireMessage,
} from "./protocol.js";
import { ConsoleState, initialState, reduce } from "./state.js";
import { InterventionButton, ThrottleController } from "./throttle.js";

const RETRY_BASE_MS = 500;
const RETRY_MAX_MS = 5_000;
const CHART_WINDOW_SECONDS = 8;

const state: ConsoleState = initialState();
let socket: WebSocket | null = null;
let retryDelay = RETRY_BASE_MS;
let eventSeq = 0;

const nowSeconds = () => performance.now() / 1000;

const throttle = new ThrottleController((msg) => {
  if (socket && socket.readyState === WebSocket.OPEN) {
    socket.send(serializeMessage(msg).trim());
  }
}, nowSeconds);

const intervention = new InterventionButton((seq, t) => {
  eventSeq += 1;
  if (socket && socket.readyState === WebSocket.OPEN) {
    socket.send(serializeMessage(makeIntervention(eventSeq, t)).trim());
  }
}, nowSeconds);

function connect(): void {
  state.connection = "connecting";
  const url = `${location.origin.replace(/^http/, "ws")}/ws`;
  socket = new WebSocket(url);
  socket.onopen = () => {
    state.connection = "connected";
    retryDelay = RETRY_BASE_MS;
  };
  socket.onmessage = (ev) => {
    let msg: WireMessage;
    try {
      msg = parseMessage(String(ev.data));
    } catch {
      return;
    }
    reduce(state, msg);
    throttle.setFeedbackPeriod(state.feedbackPeriod);
  };
  socket.onclose = () => {
    state.connection = "disconnected";
    socket = null;
    setTimeout(connect, retryDelay);
    retryDelay = Math.min(retryDelay * 2, RETRY_MAX_MS);
  };
}

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

function render(): void {
  byId<HTMLSpanElement>("status").textContent = state.connection;
  byId<HTMLSpanElement>("status").className = `status ${state.connection}`;
  const fmt = (v: number | null, digits = 2) => (v === null ? "–" : v.toFixed(digits));
  byId<HTMLSpanElement>("model-scale").textContent = fmt(state.modelScale);
  byId<HTMLSpanElement>("effective-scale").textContent = fmt(state.effectiveScale);
  byId<HTMLSpanElement>("episode-time").textContent = fmt(state.episodeTimer, 1);
  byId<HTMLSpanElement>("last-time").textContent = fmt(state.lastEpisodeTime, 2);
  byId<HTMLSpanElement>("best-time").textContent = fmt(state.bestEpisodeTime, 2);
  byId<HTMLSpanElement>("target-time").textContent = fmt(state.targetEpisodeTime, 2);
  byId<HTMLButtonElement>("intervene").disabled = state.connection !== "connected";
  byId<HTMLSpanElement>("paused").textContent = state.paused ? "PAUSED" : "";

  const velocityCanvas = byId<HTMLCanvasElement>("velocity-chart");
  const vctx = velocityCanvas.getContext("2d");
  if (vctx) {
    drawTrace(
      vctx, velocityCanvas.width, velocityCanvas.height,
      state.jointVelocity.map((t) => t.points), state.markers,
      CHART_WINDOW_SECONDS,
    );
  }
  const scaleCanvas = byId<HTMLCanvasElement>("scale-chart");
  const sctx = scaleCanvas.getContext("2d");
  if (sctx) {
    drawTrace(
      sctx, scaleCanvas.width, scaleCanvas.height,
      [state.executedScale.points], state.markers, CHART_WINDOW_SECONDS,
      { ...{
        stroke: "#7ddf7d", background: "#11151c",
        markerFailure: "rgba(255, 80, 80, 0.35)",
        markerIntervention: "rgba(255, 80, 80, 0.2)",
      } },
    );
  }
  throttle.tick();
  requestAnimationFrame(render);
}

export function start(): void {
  const slider = byId<HTMLInputElement>("throttle-slider");
  slider.addEventListener("input", () => throttle.setSlider(Number(slider.value)));
  slider.addEventListener("change", () => throttle.setSlider(Number(slider.value)));
  window.addEventListener("keydown", (ev) => {
    if (ev.repeat) return;
    if (ev.key === "ArrowUp") throttle.keyDown("fast");
    if (ev.key === "ArrowDown") throttle.keyDown("slow");
  });
  window.addEventListener("keyup", (ev) => {
    if (ev.key === "ArrowUp" || ev.key === "ArrowDown") {
      throttle.keyUp();
      slider.value = "0";
    }
  });
  byId<HTMLButtonElement>("preset").addEventListener("click", () => throttle.togglePreset());
  byId<HTMLButtonElement>("intervene").addEventListener("click", () => intervention.click());
  connect();
  requestAnimationFrame(render);
}

if (typeof document !== "undefined") {
  window.addEventListener("DOMContentLoaded", start);
}
