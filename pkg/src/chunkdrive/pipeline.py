"""Server/client rollout orchestration.

The server side stands in for the policy machine: a scripted stub samples
the next horizon of waypoints from the task's demonstration path (its tail
corrupted with seeded noise to model unreliable late predictions), a speed
model assigns per-step scale factors (modulated by the operator throttle),
and the retiming QP turns scales into durations before the chunk ships to
the client.

The client owns the robot: it merges arriving chunks into its executing
reference timeline (preserving what is about to be executed bit-exactly and
splicing the new chunk at the matching demonstration grid point), resamples
the timeline into the tracker's lookahead window each tick, steps the
plant, evaluates failures, and streams feedback upstream.

Both sides run cooperatively on the simulated clock in one thread, which
makes whole rollouts bit-reproducible; the same server/client objects are
driven by sockets in real-clock mode.

Waypoints live on a fixed demonstration-time grid (one grid step is
``chunk_period / (H - 1)`` seconds of demo time), so a waypoint index *is*
a task progress coordinate; merging and progress accounting are exact
integer bookkeeping.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Chunk, TimingCalibration
from .plant_sim import (
    PlantConfig,
    PlantState,
    TaskScript,
    evaluate_step,
    plant_step,
    read_proprio,
)
from .spatial_opt import SpatialParams, Tracker, TrackerState, replay_correction, tracker_tick
from .speed_adapt import (
    SpeedModel,
    StepContext,
    apply_throttle,
    extract_features,
    predict_scale,
)
from .temporal_opt import TemporalParams, retime_chunk
from .wire import (
    ChunkMsg,
    EventMsg,
    FeedbackMsg,
    Mailbox,
    ThrottleMsg,
    decode_message,
    encode_message,
    message_to_dict,
)

__all__ = [
    "PolicyStubConfig",
    "RolloutLog",
    "ChunkMsg",
    "FeedbackMsg",
    "ThrottleMsg",
    "EventMsg",
    "encode_message",
    "decode_message",
    "policy_stub_infer",
    "merge_chunk_prefix",
    "path_speed",
    "samples_from_log",
    "Server",
    "Client",
    "ScriptedOperator",
    "run_episode",
    "EpisodeResult",
]


@dataclass
class PolicyStubConfig:
    H: int = 20
    chunk_period: float = 1.0
    inference_latency: float = 0.1
    tail_fraction: float = 0.25
    tail_noise_std: float = 0.01

    def __post_init__(self) -> None:
        if self.H < 4:
            raise ValueError("H must be at least 4")
        if self.inference_latency < 0:
            raise ValueError("inference latency must be non-negative")
        if not (0.0 <= self.tail_fraction < 1.0):
            raise ValueError("tail fraction must lie in [0, 1)")

    @property
    def demo_dt(self) -> float:
        return self.chunk_period / (self.H - 1)

    @property
    def tail_count(self) -> int:
        return int(self.tail_fraction * self.H)


class RolloutLog:
    """Append-only, time-ordered record list; one JSON object per line."""

    def __init__(self) -> None:
        self.records: list = []

    def append(self, record: dict) -> None:
        self.records.append(record)

    def message(self, direction: str, msg) -> None:
        self.records.append(
            {"record": "message", "dir": direction, "data": message_to_dict(msg)}
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "RolloutLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.records.append(json.loads(line))
        return log

    def dumps(self) -> str:
        return "\n".join(json.dumps(rec) for rec in self.records)

    def select(self, kind: str) -> list:
        return [r for r in self.records if r.get("record") == kind]


def policy_stub_infer(
    task: TaskScript,
    progress: float,
    cfg: PolicyStubConfig,
    chunk_id: int,
    seed: int = 0,
) -> tuple[Chunk, int] | None:
    """Next H waypoints along the demonstration path at demo pacing.

    The chunk starts at the first demo grid index at or past `progress`;
    returns (chunk, start_index) with demo-paced durations, or None at the
    episode end. The last ``tail_fraction * H`` waypoints get additive
    seeded noise, modeling unreliable late predictions.
    """
    if progress >= 1.0:
        return None
    demo_dt = cfg.demo_dt
    total = task.total_duration_1x
    start_index = int(math.ceil(progress * total / demo_dt - 1e-9))
    times = (start_index + np.arange(cfg.H)) * demo_dt
    waypoints = np.stack([task.sample(t) for t in times])
    n_tail = cfg.tail_count
    if n_tail > 0 and cfg.tail_noise_std > 0:
        rng = np.random.default_rng((seed, 7919, chunk_id))
        waypoints[-n_tail:] += rng.normal(0.0, cfg.tail_noise_std, waypoints[-n_tail:].shape)
    chunk = Chunk(
        waypoints=waypoints,
        durations=np.full(cfg.H - 1, demo_dt),
        origin_time=0.0,
        chunk_id=chunk_id,
    )
    return chunk, start_index


def merge_chunk_prefix(
    executing: Chunk,
    incoming: Chunk,
    now: float,
    executing_start_index: int,
    incoming_start_index: int,
    switch_margin: float,
) -> tuple[Chunk, int] | None:
    """Splice an arriving chunk into the executing timeline.

    Everything scheduled before ``now + switch_margin`` is preserved
    bit-exactly from the executing chunk; from the first waypoint past the
    margin onward, the incoming chunk's waypoints (matched on the shared
    demonstration grid) take over. Returns None when the incoming chunk
    lies entirely in the past (nothing usable), keeping the executing one.
    """
    times = executing.origin_time + executing.waypoint_times()
    cut = int(np.searchsorted(times, now + switch_margin, side="left"))
    cut = min(cut, executing.n_waypoints)
    k = executing_start_index + cut - incoming_start_index
    if k >= incoming.n_waypoints - 1:
        return None
    if k < 0:
        # incoming starts beyond the preserved prefix: the demo grid has a
        # hole we cannot bridge, keep executing
        return None
    waypoints = np.concatenate([executing.waypoints[:cut], incoming.waypoints[k:]])
    if cut <= executing.durations.shape[0]:
        # executing durations cover every preserved segment including the
        # one landing on the splice waypoint
        durations = np.concatenate([executing.durations[:cut], incoming.durations[k:]])
    else:
        # whole executing chunk preserved: the connector segment between its
        # last waypoint and the splice waypoint comes from the incoming side
        connector = incoming.durations[max(k - 1, 0) : max(k - 1, 0) + 1]
        durations = np.concatenate([executing.durations, connector, incoming.durations[k:]])
    merged = Chunk(
        waypoints=waypoints,
        durations=durations,
        origin_time=executing.origin_time,
        chunk_id=incoming.chunk_id,
    )
    return merged, executing_start_index


def trim_consumed(chunk: Chunk, start_index: int, now: float) -> tuple[Chunk, int]:
    """Drop fully executed waypoints, keeping the segment containing now."""
    times = chunk.origin_time + chunk.waypoint_times()
    keep_from = int(np.searchsorted(times, now, side="right")) - 1
    keep_from = max(keep_from, 0)
    if keep_from == 0 or chunk.n_waypoints - keep_from < 2:
        return chunk, start_index
    trimmed = Chunk(
        waypoints=chunk.waypoints[keep_from:],
        durations=chunk.durations[keep_from:],
        origin_time=float(times[keep_from]),
        chunk_id=chunk.chunk_id,
    )
    return trimmed, start_index + keep_from


def path_speed(task: TaskScript, progress: float, demo_dt: float) -> float:
    """Demonstration-pace joint speed of the reference path at a progress.

    Used as the speed feature on both the training and the inference side;
    deliberately independent of the executed scale so the regressor cannot
    read its own target out of a feature.
    """
    total = task.total_duration_1x
    t0 = progress * total
    return float(
        np.max(np.abs(task.sample(t0 + demo_dt) - task.sample(t0))) / demo_dt
    )


def samples_from_log(
    log: RolloutLog,
    task: TaskScript,
    stub: PolicyStubConfig,
    episode_id: int,
    round_index: int = 0,
    discard_window: float = 0.4,
) -> list:
    """Throttle-regression samples from one episode's shipped chunks.

    Each executed step of each sent chunk yields one sample: the features
    exactly as the server computed them at inference time, and the
    effective scale (model times throttle) the step was requested to run
    at. Targeting the requested scale rather than the realized per-tick
    pace keeps the retiming QP's duration redistribution out of the
    imitation loop, since retiming is re-applied at deployment anyway.
    Only steps up to the next chunk's takeover point count: the unexecuted
    tail of a superseded chunk reflects a stale throttle reading, not what
    the operator made the robot do. Samples whose scheduled wall time falls
    within `discard_window` seconds of a failure are flagged discarded.
    """
    from .speed_adapt import ThrottleSample, discard_failure_region

    demo_dt = stub.demo_dt
    total = task.total_duration_1x
    meta_by_id = {rec["chunk_id"]: rec for rec in log.select("chunk_meta")}
    starts = {cid: int(m["start_index"]) for cid, m in meta_by_id.items()}
    next_start = {}
    for cid in sorted(starts):
        later = [starts[c] for c in starts if c > cid]
        next_start[cid] = min(later) if later else None
    samples = []
    for rec in log.select("message"):
        if rec["dir"] != "s2c" or rec["data"].get("type") != "chunk":
            continue
        data = rec["data"]
        meta = meta_by_id.get(data["chunk_id"])
        if meta is None:
            continue
        start_index = int(meta["start_index"])
        effective = meta["effective_scales"]
        takeover = next_start.get(data["chunk_id"])
        if takeover is not None:
            effective = effective[: max(takeover + 1 - start_index, 1)]
        waypoints = np.asarray(data["waypoints"], dtype=float)
        step_times = data["origin_time"] + np.concatenate(
            [[0.0], np.cumsum(np.asarray(data["durations"], dtype=float))]
        )
        for i, scale in enumerate(effective):
            progress_i = min((start_index + i) * demo_dt / total, 1.0)
            ctx = StepContext(
                task=task,
                progress=progress_i,
                position=waypoints[i],
                tracking_error=0.0,  # matches inference; see Server.step_scales
                mean_joint_speed=path_speed(task, progress_i, demo_dt),
            )
            samples.append(
                ThrottleSample(
                    features=extract_features(ctx),
                    operator_scale=float(scale),
                    episode_id=episode_id,
                    step_time=float(step_times[i]),
                    round_index=round_index,
                )
            )
    for rec in log.select("failure"):
        discard_failure_region(samples, float(rec["t"]), discard_window)
    return samples


@dataclass
class EpisodeResult:
    outcome: str  # "success" | "failure" | "stall" | "timeout"
    wall_time: float
    progress: float
    failures: list
    log: RolloutLog
    tick_solve_seconds: list = field(default_factory=list)
    mean_executed_scale: float = float("nan")


class Server:
    """Policy-side loop: infer, scale, retime, ship."""

    def __init__(
        self,
        task: TaskScript,
        stub: PolicyStubConfig,
        temporal: TemporalParams,
        speed_model: SpeedModel | None = None,
        uniform_scale: float | None = None,
        s_min: float = 0.5,
        s_cap: float = 3.0,
        max_rel: float = 2.0,
        seed: int = 0,
        log: RolloutLog | None = None,
    ) -> None:
        if speed_model is not None and uniform_scale is not None:
            raise ValueError("give either a speed model or a uniform scale, not both")
        self.task = task
        self.stub = stub
        self.temporal = temporal
        self.speed_model = speed_model
        self.uniform_scale = uniform_scale
        self.s_min = s_min
        self.s_cap = s_cap
        self.max_rel = max_rel
        self.seed = seed
        self.log = log
        self.busy_until = -math.inf
        self.next_chunk_id = 0
        self.seq = 0
        self.throttle_input = 0.0  # zero-order hold of the newest ThrottleMsg
        self.last_feedback: FeedbackMsg | None = None
        self.ended = False

    def step_scales(self, start_index: int, chunk: Chunk, feedback: FeedbackMsg) -> tuple[np.ndarray, np.ndarray]:
        """(model scales, effective scales) for each step of the chunk."""
        demo_dt = self.stub.demo_dt
        total = self.task.total_duration_1x
        n_steps = chunk.n_waypoints - 1
        model_scales = np.empty(n_steps)
        if self.uniform_scale is not None:
            model_scales[:] = self.uniform_scale
        elif self.speed_model is None:
            model_scales[:] = 1.0
        else:
            for i in range(n_steps):
                progress_i = min((start_index + i) * demo_dt / total, 1.0)
                # tracking_error is fed as zero on both the training and the
                # inference side: in closed loop the realized error is a
                # proxy for the executed speed itself (target leakage), and
                # the server-side estimate from delayed feedback is
                # systematically speed-biased
                ctx = StepContext(
                    task=self.task,
                    progress=progress_i,
                    position=chunk.waypoints[i],
                    tracking_error=0.0,
                    mean_joint_speed=path_speed(self.task, progress_i, demo_dt),
                )
                model_scales[i] = predict_scale(self.speed_model, extract_features(ctx))
        # The throttle names a desired absolute pace relative to where
        # execution currently is (the chunk head); each step moves toward
        # that target but never further than max_rel from its own model
        # prediction. Steps the model already runs at the target are left
        # untouched, so repeated collection rounds cannot compound drift.
        target = apply_throttle(
            float(model_scales[0]), self.throttle_input, self.max_rel,
            self.s_min, self.s_cap,
        )
        effective = np.clip(target, model_scales / self.max_rel, model_scales * self.max_rel)
        effective = np.clip(effective, self.s_min, self.s_cap)
        return model_scales, effective

    def on_throttle(self, msg: ThrottleMsg) -> None:
        self.throttle_input = float(np.clip(msg.operator_input, -1.0, 1.0))
        if self.log is not None:
            self.log.message("c2s", msg)

    def on_feedback(self, msg: FeedbackMsg, now: float) -> list:
        """Returns [(available_at, wire message), ...] to ship clientward."""
        if self.log is not None:
            self.log.message("c2s", msg)
        self.last_feedback = msg
        out = []
        if self.ended or now < self.busy_until:
            return out
        if msg.progress >= 1.0:
            self.ended = True
            event = EventMsg(seq=self._next_seq(), kind="episode_end", timestamp=now,
                             payload={"progress": msg.progress})
            out.append((now, event))
            if self.log is not None:
                self.log.message("s2c", event)
            return out
        result = policy_stub_infer(
            self.task, msg.progress, self.stub, self.next_chunk_id, seed=self.seed
        )
        if result is None:
            self.ended = True
            return out
        chunk, start_index = result
        model_scales, effective = self.step_scales(start_index, chunk, msg)
        retimed = retime_chunk(chunk, effective, self.temporal)
        ready = now + self.stub.inference_latency
        prefix_len = max(
            int(math.ceil(self.stub.inference_latency / max(self.stub.demo_dt, 1e-9))), 0
        )
        out_chunk = replace(retimed.chunk, origin_time=msg.timestamp)
        msg_chunk = ChunkMsg(
            seq=self._next_seq(),
            chunk_id=chunk.chunk_id,
            waypoints=out_chunk.waypoints.tolist(),
            durations=out_chunk.durations.tolist(),
            origin_time=out_chunk.origin_time,
            prefix_len=prefix_len,
        )
        scale_event = EventMsg(
            seq=self._next_seq(),
            kind="scale",
            timestamp=now,
            payload={
                "chunk_id": chunk.chunk_id,
                "model_scale": float(np.mean(model_scales)),
                "model_scale_head": float(model_scales[0]),
                "effective_scale": float(np.mean(effective)),
                "effective_scale_head": float(effective[0]),
                "throttle_input": self.throttle_input,
            },
        )
        self.next_chunk_id += 1
        self.busy_until = ready
        out.append((ready, msg_chunk))
        out.append((now, scale_event))
        if self.log is not None:
            self.log.message("s2c", msg_chunk)
            self.log.message("s2c", scale_event)
            self.log.append(
                {
                    "record": "chunk_meta",
                    "chunk_id": chunk.chunk_id,
                    "start_index": start_index,
                    "model_scales": [float(v) for v in model_scales],
                    "effective_scales": [float(v) for v in effective],
                    "retime_converged": bool(retimed.converged),
                }
            )
        return out

    def _next_seq(self) -> int:
        self.seq += 1
        return self.seq


class Client:
    """Robot-side loop: merge chunks, track, step the plant, report back."""

    def __init__(
        self,
        plant: PlantState,
        task: TaskScript,
        stub: PolicyStubConfig,
        spatial: SpatialParams,
        calibration: TimingCalibration,
        feedback_every: int = 2,
        switch_margin_ticks: int = 2,
        stop_on_failure: bool = True,
        log: RolloutLog | None = None,
    ) -> None:
        self.plant = plant
        self.task = task
        self.stub = stub
        self.spatial = spatial
        self.calibration = calibration
        self.feedback_every = feedback_every
        self.switch_margin = switch_margin_ticks * spatial.h
        self.stop_on_failure = stop_on_failure
        self.log = log
        self.a = math.exp(-spatial.h / calibration.tau)
        n_joints = plant.config.n_joints
        self.tracker = Tracker(spatial, self.a, n_joints)
        self.tstate = TrackerState(
            y_prev1=plant.q.copy(),
            y_prev2=plant.q.copy(),
            corrected_q=plant.q.copy(),
        )
        self.timeline: Chunk | None = None
        self.timeline_start_index = 0
        self.executing_chunk_id = -1
        self.seq = 0
        self.tick_count = 0
        self.last_proprio_t = -math.inf
        self.latest_reported = plant.q.copy()
        self.progress_history: list = []  # (timestamp, progress) ring
        self.failures: list = []
        self.stall_ticks = 0
        self.solve_seconds: list = []
        self.scale_trace: list = []
        self.done = False
        self.outcome = "timeout"

    # -- chunk handling ------------------------------------------------------

    def _progress_at(self, timestamp: float) -> float:
        for t, p in reversed(self.progress_history):
            if abs(t - timestamp) < 1e-9:
                return p
        # fall back to the closest earlier entry
        best = 0.0
        for t, p in self.progress_history:
            if t <= timestamp + 1e-9:
                best = p
        return best

    def on_chunk(self, msg: ChunkMsg, now: float) -> None:
        incoming = Chunk(
            waypoints=np.asarray(msg.waypoints, dtype=float),
            durations=np.asarray(msg.durations, dtype=float),
            origin_time=msg.origin_time,
            chunk_id=msg.chunk_id,
        )
        total = self.task.total_duration_1x
        demo_dt = self.stub.demo_dt
        progress_then = self._progress_at(msg.origin_time)
        incoming_start = int(math.ceil(progress_then * total / demo_dt - 1e-9))
        usable = incoming.n_waypoints - self.stub.tail_count
        if usable >= 2:
            incoming = Chunk(
                waypoints=incoming.waypoints[:usable],
                durations=incoming.durations[: usable - 1],
                origin_time=incoming.origin_time,
                chunk_id=incoming.chunk_id,
            )
        if self.timeline is None:
            start_wall = max(now, 0.0)
            self.timeline = replace(incoming, origin_time=start_wall)
            self.timeline_start_index = incoming_start
            self.executing_chunk_id = incoming.chunk_id
            return
        merged = merge_chunk_prefix(
            self.timeline,
            incoming,
            now,
            self.timeline_start_index,
            incoming_start,
            self.switch_margin,
        )
        if merged is None:
            return
        self.timeline, self.timeline_start_index = merged
        self.executing_chunk_id = incoming.chunk_id

    # -- per-tick ------------------------------------------------------------

    def _window(self, now: float) -> tuple[np.ndarray, float, float, bool]:
        """(reference window, progress, executed scale, starving)."""
        p = self.spatial
        n_joints = self.plant.config.n_joints
        demo_dt = self.stub.demo_dt
        total = self.task.total_duration_1x
        if self.timeline is None:
            ref = np.tile(self.plant.q, (p.N + 1, 1))
            return ref, 0.0, 1.0, False
        times = self.timeline.origin_time + self.timeline.waypoint_times()
        grid = now + np.arange(p.N + 1) * p.h
        wp = self.timeline.waypoints
        idx = np.clip(np.searchsorted(times, grid, side="right") - 1, 0, len(times) - 2)
        span = times[idx + 1] - times[idx]
        frac_g = np.clip((grid - times[idx]) / span, 0.0, 1.0)
        ref = wp[idx] + frac_g[:, None] * (wp[idx + 1] - wp[idx])
        seg = int(np.clip(np.searchsorted(times, now, side="right") - 1, 0,
                          len(self.timeline.durations) - 1))
        frac = (now - times[seg]) / self.timeline.durations[seg]
        frac = float(np.clip(frac, 0.0, 1.0))
        index = self.timeline_start_index + seg + frac
        progress = min(index * demo_dt / total, 1.0)
        scale = demo_dt / float(self.timeline.durations[seg])
        starving = now > times[-1] - 1e-9
        return ref, progress, scale, starving

    def tick(self, now: float) -> list:
        """One control tick; returns [(available_at, message), ...] upstream."""
        ref, progress, scale, starving = self._window(now)
        out = []
        if starving:
            self.stall_ticks += 1
            scale = 0.0
        # fuse newest delayed feedback by replaying logged commands
        if self.plant.now > self.plant.config.t_proprio:
            ts, value = read_proprio(self.plant)
            if ts > self.last_proprio_t:
                self.last_proprio_t = ts
                self.latest_reported = value
                q_hat, _ = replay_correction(
                    (ts, value),
                    self.tstate.command_log,
                    self.a,
                    self.spatial.h,
                    self.plant.config.q_min,
                    self.plant.config.q_max,
                )
                self.tstate.corrected_q = q_hat
        result = tracker_tick(self.tracker, self.tstate, ref, now)
        self.solve_seconds.append(result.solve_seconds)
        self.plant_step(result.command)
        if len(self.tstate.command_log) > 4096:
            del self.tstate.command_log[:2048]

        tracking_error = float(np.max(np.abs(self.plant.q - ref[0])))
        event = evaluate_step(
            self.plant, self.task, progress, tracking_error, max(scale, 0.0), self.spatial.h
        )
        self.scale_trace.append(scale)
        if self.log is not None:
            self.log.append(
                {
                    "record": "tick",
                    "t": now,
                    "cmd": [float(v) for v in result.command],
                    "q": [float(v) for v in self.plant.q],
                    "q_hat": [float(v) for v in self.tstate.corrected_q],
                    "ref": [float(v) for v in ref[0]],
                    "progress": progress,
                    "scale": scale,
                    "tracking_error": tracking_error,
                    "chunk_id": self.executing_chunk_id,
                    "degraded": bool(result.degraded),
                    "starving": bool(starving),
                }
            )
        if event is not None:
            self.failures.append(event)
            ev = EventMsg(
                seq=self._next_seq(), kind="failure", timestamp=now,
                payload={"progress": event.progress_fraction,
                         "window_index": event.window_index},
            )
            out.append((now, ev))
            if self.log is not None:
                self.log.append(
                    {"record": "failure", "t": now,
                     "progress": event.progress_fraction,
                     "window": event.window_index}
                )
                self.log.message("c2s", ev)
            if self.stop_on_failure:
                self.done = True
                self.outcome = "failure"

        self.tick_count += 1
        self.progress_history.append((now + self.spatial.h, progress))
        if len(self.progress_history) > 4096:
            del self.progress_history[:2048]
        if self.tick_count % self.feedback_every == 0:
            fb_time = now + self.spatial.h
            reported = self.latest_reported
            fb = FeedbackMsg(
                seq=self._next_seq(),
                timestamp=fb_time,
                reported_q=[float(v) for v in reported],
                executed_chunk_id=self.executing_chunk_id,
                progress=progress,
            )
            out.append((fb_time, fb))
        if progress >= 1.0 - 1e-9:
            self.done = True
            self.outcome = "success"
        # timeline housekeeping
        if self.timeline is not None and self.tick_count % 50 == 0:
            self.timeline, self.timeline_start_index = trim_consumed(
                self.timeline, self.timeline_start_index, now
            )
        return out

    def plant_step(self, command: np.ndarray) -> None:
        plant_step(self.plant, command, self.spatial.h)

    def _next_seq(self) -> int:
        self.seq += 1
        return self.seq


class ScriptedOperator:
    """Replayable throttle policy: slow near precision windows, fast elsewhere.

    Emulates a competent operator. The throttle modulates whole chunks, so
    slowing must start at least one chunk horizon before a precision phase
    (`anticipation`, in progress fraction) or the tail of a fast chunk
    executes inside it; and it is held `hold_after` past the window end so
    the tracker's lookahead does not pre-accelerate while still inside.
    Targets are absolute scales reached through the relative throttle
    around the server's announced model scale.
    """

    def __init__(
        self,
        task: TaskScript,
        target_in: float = 1.25,
        target_out: float = 3.0,
        anticipation: float = 0.08,
        hold_after: float = 0.04,
        max_rel: float = 2.0,
    ) -> None:
        self.task = task
        self.target_in = target_in
        self.target_out = target_out
        self.anticipation = anticipation
        self.hold_after = hold_after
        self.max_rel = max_rel
        self.model_scale = 1.0

    def observe_scale_event(self, payload: dict) -> None:
        # anchor on the model's scale where execution currently is (the
        # chunk head), not the whole-chunk mean: per-step scales vary and a
        # mean anchor makes the throttle over-correct the slow steps
        head = payload.get("model_scale_head", payload.get("model_scale"))
        self.model_scale = float(head) if head is not None else self.model_scale

    def wants_slow(self, progress: float) -> bool:
        if self.task.window_at(progress) is not None:
            return True
        for w in self.task.precision_windows:
            if w.start - self.anticipation <= progress <= w.end + self.hold_after:
                return True
        return False

    def input_for(self, progress: float) -> float:
        target = self.target_in if self.wants_slow(progress) else self.target_out
        base = max(self.model_scale, 1e-6)
        return float(np.clip(math.log(target / base) / math.log(self.max_rel), -1.0, 1.0))


def run_episode(
    task: TaskScript,
    plant_config: PlantConfig,
    stub: PolicyStubConfig,
    temporal: TemporalParams,
    spatial: SpatialParams,
    calibration: TimingCalibration,
    speed_model: SpeedModel | None = None,
    uniform_scale: float | None = None,
    operator: ScriptedOperator | None = None,
    seed: int = 0,
    episode_id: int = 0,
    round_index: int = 0,
    stop_on_failure: bool = True,
    feedback_every: int = 2,
    switch_margin_ticks: int = 2,
    s_min: float = 0.5,
    s_cap: float = 3.0,
    max_rel: float = 2.0,
    max_wall_time: float | None = None,
    config_snapshot: dict | None = None,
    ui=None,
    pace_real_time: bool = False,
) -> EpisodeResult:
    """One full episode on the simulated clock, bit-reproducible per seed.

    With `ui` set (an object with ``sink(msg)`` and ``poll() -> list``),
    feedback and event messages are mirrored to it and throttle /
    intervention messages from it are injected; `pace_real_time` sleeps
    each tick to the wall clock so a human can drive the throttle.
    """
    log = RolloutLog()
    log.append({"record": "config", "data": config_snapshot or {
        "seed": seed, "episode_id": episode_id, "round_index": round_index,
        "uniform_scale": uniform_scale, "has_model": speed_model is not None,
    }})
    log.append({"record": "calibration", "data": calibration.to_dict()})

    plant = PlantState(
        config=replace(plant_config, rng_seed=plant_config.rng_seed * 100003 + episode_id),
        q=task.sample(0.0),
    )
    server = Server(
        task=task, stub=stub, temporal=temporal, speed_model=speed_model,
        uniform_scale=uniform_scale, s_min=s_min, s_cap=s_cap, max_rel=max_rel,
        seed=seed, log=log,
    )
    client = Client(
        plant=plant, task=task, stub=stub, spatial=spatial, calibration=calibration,
        feedback_every=feedback_every, switch_margin_ticks=switch_margin_ticks,
        stop_on_failure=stop_on_failure, log=log,
    )
    to_client = Mailbox()
    to_server = Mailbox()

    h = spatial.h
    if max_wall_time is None:
        max_wall_time = 3.0 * task.total_duration_1x / max(
            min(uniform_scale or 1.0, 1.0), 0.25
        ) + 5.0

    # bootstrap feedback so the server produces the first chunk
    fb0 = FeedbackMsg(seq=0, timestamp=0.0, reported_q=[float(v) for v in plant.q],
                      executed_chunk_id=-1, progress=0.0)
    client.progress_history.append((0.0, 0.0))
    to_server.send(fb0, 0.0)

    tick = 0
    now = 0.0
    throttle_seq = 0
    paused = False
    wall_start = time.monotonic() if pace_real_time else 0.0
    while not client.done and now < max_wall_time:
        now = tick * h
        if ui is not None:
            for msg in ui.poll():
                if isinstance(msg, ThrottleMsg):
                    to_server.send(msg, now)
                elif isinstance(msg, EventMsg) and msg.kind == "intervention":
                    paused = not paused
                    log.message("c2s", msg)
                    log.append({"record": "intervention", "t": now, "paused": paused})
                    ui.sink(msg)
        for msg in to_server.poll(now):
            if isinstance(msg, FeedbackMsg):
                for available_at, out in server.on_feedback(msg, now):
                    to_client.send(out, available_at)
            elif isinstance(msg, ThrottleMsg):
                server.on_throttle(msg)
        for msg in to_client.poll(now):
            if isinstance(msg, ChunkMsg):
                if not paused:
                    client.on_chunk(msg, now)
            elif isinstance(msg, EventMsg):
                if msg.kind == "scale" and operator is not None:
                    operator.observe_scale_event(msg.payload)
                if ui is not None:
                    ui.sink(msg)
        if paused:
            plant_step(client.plant, client.tstate.y_prev1, h)
            upstream = []
        else:
            upstream = client.tick(now)
        for available_at, msg in upstream:
            to_server.send(msg, available_at)
            if isinstance(msg, FeedbackMsg):
                if ui is not None:
                    ui.sink(msg)
                if operator is not None:
                    throttle_seq += 1
                    t_msg = ThrottleMsg(
                        seq=throttle_seq,
                        timestamp=msg.timestamp,
                        operator_input=operator.input_for(msg.progress),
                    )
                    to_server.send(t_msg, available_at)
            elif isinstance(msg, EventMsg) and ui is not None:
                ui.sink(msg)
        tick += 1
        if pace_real_time:
            deadline = wall_start + tick * h
            delay = deadline - time.monotonic()
            if delay > 0:
                time.sleep(delay)

    wall = tick * h
    executed = [s for s in client.scale_trace if s > 0]
    outcome = client.outcome
    if not client.done:
        outcome = "stall" if client.stall_ticks > 0.2 * max(tick, 1) else "timeout"
    final_progress = client.progress_history[-1][1] if client.progress_history else 0.0
    log.append(
        {
            "record": "episode_end",
            "t": wall,
            "outcome": outcome,
            "progress": final_progress,
            "wall_time": wall,
            "episode": episode_id,
            "round_index": round_index,
            "stall_ticks": client.stall_ticks,
        }
    )
    return EpisodeResult(
        outcome=outcome,
        wall_time=wall,
        progress=final_progress,
        failures=client.failures,
        log=log,
        tick_solve_seconds=client.solve_seconds,
        mean_executed_scale=float(np.mean(executed)) if executed else float("nan"),
    )
