"""Offline analytics over rollout logs.

Three families of questions:

- Speed-up geometry: a chunk covers a fixed span of demonstration time, its
  head is buried by pipeline latency before it arrives, and its tail is too
  unreliable to execute. Speeding up execution shrinks the usable middle in
  wall-clock terms; `usable_time` and `max_speedup` quantify the boundary,
  and `simulate_chunk_supply` cross-checks it with a discrete-event model
  of the inference/consumption race.

- Failure structure: histograms of failure progress per execution speed and
  the fraction of failure mass inside precision windows.

- Trajectory quality: before/after velocity, acceleration, and jerk
  statistics of chunk streams, written as CSV plot data plus a JSON
  summary, and a per-window segmentation of an episode into motion-bounded
  (kinematic limits nearly saturated), control-bounded (speed held below
  what the chunk-supply geometry allows, by the model or by precision
  phases), and unbounded time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import Chunk, compute_profile

__all__ = [
    "SpeedupGeometry",
    "SegmentLabel",
    "usable_time",
    "max_speedup",
    "simulate_chunk_supply",
    "find_stall_speedup",
    "classify_segments",
    "failure_histogram",
    "profile_report",
]


@dataclass
class SpeedupGeometry:
    chunk_duration: float  # demo-time span of one chunk, seconds
    prefix_overhead: float  # wall seconds from trigger to usable delivery
    unreliable_tail: float  # demo-time tail that must not execute, seconds
    speedup: float = 1.0

    def __post_init__(self) -> None:
        for name in ("chunk_duration", "prefix_overhead", "unreliable_tail", "speedup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def usable_time(geom: SpeedupGeometry) -> float:
    """Wall-clock seconds of fresh reference one chunk provides.

    (chunk_duration - unreliable_tail) / speedup - prefix_overhead; negative
    means the pipeline cannot keep the robot supplied at this speed.
    """
    return (geom.chunk_duration - geom.unreliable_tail) / geom.speedup - geom.prefix_overhead


def max_speedup(geom: SpeedupGeometry) -> float:
    """Supremum speed-up with positive usable time.

    Zero usable chunk at any speed (tail >= duration) reports 0.
    """
    if geom.prefix_overhead <= 0:
        raise ValueError("prefix_overhead must be positive")
    usable_demo = geom.chunk_duration - geom.unreliable_tail
    if usable_demo <= 0:
        return 0.0
    return usable_demo / geom.prefix_overhead


def simulate_chunk_supply(
    geom: SpeedupGeometry,
    n_waypoints: int = 20,
    horizon: float = 60.0,
    trigger_period: float | None = None,
) -> bool:
    """Discrete-event model of the chunk supply race; True when it stalls.

    The client consumes demo time at `speedup` demo-seconds per wall
    second. Inference is pipelined: a new chunk is triggered every
    `trigger_period` wall seconds (default: a small fraction of the
    latency, i.e. triggers are feedback-limited rather than
    inference-occupancy-limited), delivers `prefix_overhead` later, and
    extends the usable horizon to its trigger progress plus the usable
    chunk span, quantized to the waypoint grid. Stall = the consumer
    reaches the usable horizon before a delivery pushes it out. A server
    that cannot overlap inferences saturates earlier; model that by
    folding its occupancy into `prefix_overhead`.
    """
    demo_dt = geom.chunk_duration / max(n_waypoints - 1, 1)
    usable_span = geom.chunk_duration - geom.unreliable_tail
    usable_span = math.floor(usable_span / demo_dt + 1e-12) * demo_dt  # waypoint grid
    if usable_span <= 0:
        return True
    if trigger_period is None:
        trigger_period = geom.prefix_overhead / 50.0
    s = geom.speedup
    horizon_demo = usable_span  # bootstrap chunk delivered at t=0
    k = 0
    while True:
        t_trigger = k * trigger_period
        t_delivery = t_trigger + geom.prefix_overhead
        if t_delivery > horizon:
            return False
        # worst margin occurs just before this delivery lands
        if s * t_delivery >= horizon_demo - 1e-12:
            return True
        # chunks start at the demo grid index at or past the trigger progress
        new_horizon = math.ceil(s * t_trigger / demo_dt - 1e-12) * demo_dt + usable_span
        horizon_demo = max(horizon_demo, new_horizon)
        k += 1


def find_stall_speedup(
    geom: SpeedupGeometry,
    n_waypoints: int = 20,
    resolution: float = 0.02,
    s_max: float = 20.0,
) -> float:
    """Smallest simulated speedup that stalls (bisection to `resolution`)."""
    lo, hi = 0.1, s_max
    if not simulate_chunk_supply(
        SpeedupGeometry(geom.chunk_duration, geom.prefix_overhead, geom.unreliable_tail, hi),
        n_waypoints,
    ):
        return math.inf
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        stalls = simulate_chunk_supply(
            SpeedupGeometry(geom.chunk_duration, geom.prefix_overhead, geom.unreliable_tail, mid),
            n_waypoints,
        )
        if stalls:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class SegmentLabel:
    start: float
    end: float
    label: str  # "motion_bounded" | "control_bounded" | "unbounded"
    binding_quantity: str  # "velocity" | "acceleration" | "jerk" | "latency" | "none"


def classify_segments(
    log_records: list,
    v_max_hw: np.ndarray,
    a_max_hw: np.ndarray,
    jerk_max_hw: np.ndarray,
    geom: SpeedupGeometry,
    s_cap: float = 3.0,
    window_seconds: float = 0.5,
    eta: float = 0.8,
) -> list:
    """Partition an episode into motion/control-bounded/unbounded windows.

    Per time window: motion_bounded when any joint's realized velocity,
    acceleration, or jerk reaches `eta` of its hardware limit;
    control_bounded when the executed speed scale sits clearly below both
    the configured cap and what the chunk-supply geometry allows (the
    operational proxy for "could go faster but must not"); else unbounded.
    """
    if v_max_hw is None or a_max_hw is None or jerk_max_hw is None:
        raise ValueError("hardware limits are required for segment classification")
    ticks = [r for r in log_records if r.get("record") == "tick"]
    if len(ticks) < 4:
        return []
    t = np.array([r["t"] for r in ticks])
    q = np.array([r["q"] for r in ticks])
    scale = np.array([r["scale"] for r in ticks])
    h = float(np.median(np.diff(t)))
    v = np.diff(q, axis=0) / h
    a = np.diff(v, axis=0) / h
    jerk = np.diff(a, axis=0) / h
    allowed = min(s_cap, max_speedup(geom))

    v_max_hw = np.asarray(v_max_hw, dtype=float)
    a_max_hw = np.asarray(a_max_hw, dtype=float)
    jerk_max_hw = np.asarray(jerk_max_hw, dtype=float)

    labels = []
    start = t[0]
    end_time = t[-1]
    while start < end_time - 1e-9:
        end = min(start + window_seconds, end_time)
        mask_v = (t[:-1] >= start) & (t[:-1] < end)
        mask_a = (t[:-2] >= start) & (t[:-2] < end)
        mask_j = (t[:-3] >= start) & (t[:-3] < end)
        ratios = {"velocity": 0.0, "acceleration": 0.0, "jerk": 0.0}
        if np.any(mask_v):
            ratios["velocity"] = float(np.max(np.abs(v[mask_v]) / v_max_hw))
        if np.any(mask_a):
            ratios["acceleration"] = float(np.max(np.abs(a[mask_a]) / a_max_hw))
        if np.any(mask_j):
            ratios["jerk"] = float(np.max(np.abs(jerk[mask_j]) / jerk_max_hw))
        binding = max(ratios, key=ratios.get)
        mask_s = (t >= start) & (t < end)
        mean_scale = float(np.mean(scale[mask_s])) if np.any(mask_s) else 0.0
        if ratios[binding] >= eta:
            labels.append(SegmentLabel(start, end, "motion_bounded", binding))
        elif mean_scale < 0.9 * allowed:
            labels.append(SegmentLabel(start, end, "control_bounded", "latency"))
        else:
            labels.append(SegmentLabel(start, end, "unbounded", "none"))
        start = end
    return labels


def failure_histogram(runs: dict, bins: int = 20) -> dict:
    """Per-speed histograms of failure progress fractions.

    `runs` maps speed factor -> list of failure progress fractions (one
    entry per failure, possibly from many episodes). Returns, per speed,
    the normalized histogram, total count, and the fraction of failure
    mass inside precision windows when window spans are provided alongside
    as runs[speed] entries of (progress, in_window) tuples or floats.
    """
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for speed, entries in runs.items():
        progresses = []
        in_window = 0
        for e in entries:
            if isinstance(e, tuple):
                progresses.append(e[0])
                in_window += bool(e[1])
            else:
                progresses.append(float(e))
        counts, _ = np.histogram(progresses, bins=edges)
        total = int(counts.sum())
        out[speed] = {
            "edges": edges.tolist(),
            "counts": counts.tolist(),
            "normalized": (counts / total).tolist() if total else [],
            "total": total,
            "window_mass": (in_window / total) if total else None,
        }
    return out


def profile_report(
    before: list,
    after: list,
    out_csv=None,
    out_json=None,
) -> dict:
    """Peak/variance stats of velocity/acceleration/jerk for two variants.

    `before` and `after` are chunk streams (lists of Chunk); per variant the
    profiles are concatenated in time. Optionally writes CSV plot data
    (t, per-joint max |v|, |a|, |j|, variant) and a JSON summary.
    """

    def stats(chunks: list, name: str):
        rows = []
        peak = {"velocity": 0.0, "acceleration": 0.0, "jerk": 0.0}
        sq = {"velocity": [], "acceleration": [], "jerk": []}
        t_offset = 0.0
        for chunk in chunks:
            prof = compute_profile(chunk)
            times = prof.timestamps
            for k, arr, tgrid in (
                ("velocity", prof.velocity, times[:-1]),
                ("acceleration", prof.acceleration, times[: max(len(times) - 2, 0)]),
                ("jerk", prof.jerk, times[: max(len(times) - 3, 0)]),
            ):
                if arr.shape[0]:
                    mags = np.max(np.abs(arr), axis=1)
                    peak[k] = max(peak[k], float(mags.max()))
                    sq[k].extend((arr**2).mean(axis=1).tolist())
            n = prof.velocity.shape[0]
            for i in range(n):
                rows.append(
                    (
                        t_offset + times[i],
                        float(np.max(np.abs(prof.velocity[i]))),
                        float(np.max(np.abs(prof.acceleration[i]))) if i < prof.acceleration.shape[0] else 0.0,
                        float(np.max(np.abs(prof.jerk[i]))) if i < prof.jerk.shape[0] else 0.0,
                        name,
                    )
                )
            t_offset += chunk.total_duration
        summary = {
            f"peak_{k}": peak[k] for k in peak
        } | {f"var_{k}": (float(np.var(v)) if v else 0.0) for k, v in sq.items()}
        return rows, summary

    rows_b, sum_b = stats(before, "before")
    rows_a, sum_a = stats(after, "after")
    report = {"before": sum_b, "after": sum_a}
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("t,v,a,j,variant\n")
            for row in rows_b + rows_a:
                fh.write(f"{row[0]:.6f},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g},{row[4]}\n")
    if out_json is not None:
        with open(out_json, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1)
    return report
