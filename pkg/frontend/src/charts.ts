/**
 * Canvas strip charts for the rolling traces, with marker bands.
 */

import { Marker } from "./state.js";
import { TracePoint } from "./state.js";

export interface ChartStyle {
  stroke: string;
  background: string;
  markerFailure: string;
  markerIntervention: string;
}

export const DEFAULT_STYLE: ChartStyle = {
  stroke: "#4ea1ff",
  background: "#11151c",
  markerFailure: "rgba(255, 80, 80, 0.35)",
  markerIntervention: "rgba(255, 80, 80, 0.2)",
};

export function drawTrace(
  ctx: CanvasRenderingContext2D,
  width: number,
  height: number,
  series: TracePoint[][],
  markers: Marker[],
  windowSeconds: number,
  style: ChartStyle = DEFAULT_STYLE,
): void {
  ctx.fillStyle = style.background;
  ctx.fillRect(0, 0, width, height);
  const newest = series.reduce(
    (acc, s) => Math.max(acc, s.length ? s[s.length - 1].t : -Infinity),
    -Infinity,
  );
  if (!isFinite(newest)) return;
  const t0 = newest - windowSeconds;
  const xOf = (t: number) => ((t - t0) / windowSeconds) * width;

  let lo = Infinity;
  let hi = -Infinity;
  for (const s of series) {
    for (const p of s) {
      if (p.t < t0) continue;
      lo = Math.min(lo, p.value);
      hi = Math.max(hi, p.value);
    }
  }
  if (!isFinite(lo)) return;
  const pad = 0.1 * Math.max(hi - lo, 1e-6);
  lo -= pad;
  hi += pad;
  const yOf = (v: number) => height - ((v - lo) / (hi - lo)) * height;

  for (const marker of markers) {
    if (marker.time < t0) continue;
    ctx.fillStyle =
      marker.kind === "failure" ? style.markerFailure : style.markerIntervention;
    ctx.fillRect(xOf(marker.time) - 2, 0, 4, height);
  }

  ctx.strokeStyle = style.stroke;
  ctx.lineWidth = 1.25;
  for (const s of series) {
    ctx.beginPath();
    let started = false;
    for (const p of s) {
      if (p.t < t0) continue;
      const x = xOf(p.t);
      const y = yOf(p.value);
      if (!started) {
        ctx.moveTo(x, y);
        started = true;
      } else {
        ctx.lineTo(x, y);
      }
    }
    ctx.stroke();
  }
}
