"""Shared domain types: joint vectors, chunks, clocks, and motion profiles.

A "chunk" is the unit everything else operates on: H joint-space waypoints
plus the H-1 durations between consecutive waypoints. All timestamps in the
package are monotonic seconds as float64; wall-clock time is never used in
control paths.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "JointVector",
    "DEFAULT_JOINT_COUNT",
    "as_joint_vector",
    "Chunk",
    "TimingCalibration",
    "MotionProfile",
    "Clock",
    "compute_profile",
    "resample_chunk",
]

# Joint positions are plain float64 arrays of shape (J,).
JointVector = np.ndarray

DEFAULT_JOINT_COUNT = 7  # 6 arm joints + gripper

MAX_STEP_DURATION = 10.0  # seconds; sanity bound on a single chunk step


def as_joint_vector(values, n_joints: int | None = None) -> JointVector:
    """Validate and convert to a float64 joint vector."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"joint vector must be 1-D, got shape {v.shape}")
    if n_joints is not None and v.shape[0] != n_joints:
        raise ValueError(f"expected {n_joints} joints, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("joint vector contains non-finite values")
    return v


@dataclass
class Chunk:
    """A horizon of waypoints with per-step durations.

    ``waypoints`` has shape (H, J); ``durations`` has shape (H-1,), entry i
    being the time from waypoint i to waypoint i+1. ``origin_time`` is the
    monotonic timestamp at which waypoint 0 is scheduled.
    """

    waypoints: np.ndarray
    durations: np.ndarray
    origin_time: float = 0.0
    chunk_id: int = 0

    def __post_init__(self) -> None:
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.ndim == 1:
            self.waypoints = self.waypoints[:, None]
        self.durations = np.asarray(self.durations, dtype=float)
        h = self.waypoints.shape[0]
        if h < 2:
            raise ValueError("chunk needs at least 2 waypoints")
        if self.durations.shape != (h - 1,):
            raise ValueError(
                f"durations must have length H-1={h - 1}, got {self.durations.shape}"
            )
        if not np.all(np.isfinite(self.waypoints)):
            raise ValueError("waypoints contain non-finite values")
        if np.any(self.durations <= 0.0) or np.any(self.durations >= MAX_STEP_DURATION):
            raise ValueError(f"durations must lie in (0, {MAX_STEP_DURATION}) s")

    @property
    def n_waypoints(self) -> int:
        return self.waypoints.shape[0]

    @property
    def n_joints(self) -> int:
        return self.waypoints.shape[1]

    @property
    def total_duration(self) -> float:
        return float(np.sum(self.durations))

    def waypoint_times(self) -> np.ndarray:
        """Cumulative time of each waypoint relative to origin_time."""
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def with_durations(self, durations: np.ndarray) -> "Chunk":
        return replace(self, durations=np.asarray(durations, dtype=float))


@dataclass
class TimingCalibration:
    """Measured system delays plus the plant lag time constant (seconds)."""

    t_readout: float
    t_camera: float
    t_proprio: float
    t_motion: float
    tau: float

    def __post_init__(self) -> None:
        for name in ("t_readout", "t_camera", "t_proprio", "t_motion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return {
            "t_readout": self.t_readout,
            "t_camera": self.t_camera,
            "t_proprio": self.t_proprio,
            "t_motion": self.t_motion,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimingCalibration":
        return cls(**{k: float(d[k]) for k in ("t_readout", "t_camera", "t_proprio", "t_motion", "tau")})


@dataclass
class MotionProfile:
    """Finite-difference velocity/acceleration/jerk of a chunk.

    For an H-waypoint chunk: velocity has H-1 rows, acceleration H-2,
    jerk H-3 (empty arrays when the chunk is too short).
    """

    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    timestamps: np.ndarray


class Clock:
    """Monotonic clock, real or simulated.

    The simulated clock advances only through :meth:`tick`; it never runs
    backwards. The real clock wraps ``time.monotonic`` offset to zero at
    construction.
    """

    def __init__(self, mode: str = "simulated", start: float = 0.0) -> None:
        if mode not in ("real", "simulated"):
            raise ValueError("mode must be 'real' or 'simulated'")
        self.mode = mode
        self._now = float(start)
        self._real_origin = time.monotonic() - start if mode == "real" else 0.0

    def now(self) -> float:
        if self.mode == "real":
            return time.monotonic() - self._real_origin
        return self._now

    def tick(self, dt: float) -> float:
        if self.mode != "simulated":
            raise RuntimeError("tick() only valid on a simulated clock")
        if dt < 0:
            raise ValueError("clock cannot move backwards")
        self._now += dt
        return self._now


def compute_profile(chunk: Chunk) -> MotionProfile:
    """Finite-difference motion profile of a chunk.

    Velocity over step i is (s_{i+1} - s_i) / dt_i. Acceleration and jerk
    are successive divided differences evaluated at midpoint-spaced times,
    which is the standard treatment on a non-uniform grid.
    """
    s = chunk.waypoints
    dt = chunk.durations
    times = chunk.waypoint_times()
    vel = (s[1:] - s[:-1]) / dt[:, None]
    mid = times[:-1] + 0.5 * dt  # velocity sample times
    if chunk.n_waypoints >= 3:
        acc = (vel[1:] - vel[:-1]) / (mid[1:] - mid[:-1])[:, None]
        mid2 = 0.5 * (mid[:-1] + mid[1:])  # acceleration sample times
    else:
        acc = np.empty((0, chunk.n_joints))
        mid2 = np.empty(0)
    if chunk.n_waypoints >= 4:
        jerk = (acc[1:] - acc[:-1]) / (mid2[1:] - mid2[:-1])[:, None]
    else:
        jerk = np.empty((0, chunk.n_joints))
    return MotionProfile(velocity=vel, acceleration=acc, jerk=jerk, timestamps=times)


def resample_chunk(chunk: Chunk, tick: float) -> np.ndarray:
    """Piecewise-linear samples of the chunk on a fixed-rate grid.

    Returns an array of shape (n_samples, J) at times 0, tick, 2*tick, ...
    up to the total duration; the final sample is the last waypoint exactly
    (appended off-grid if the duration is not a tick multiple).
    """
    if tick <= 0:
        raise ValueError("tick must be positive")
    total = chunk.total_duration
    times = chunk.waypoint_times()
    n = int(np.floor(total / tick + 1e-9))
    grid = np.arange(n + 1) * tick
    if total - grid[-1] > 1e-9 * max(1.0, total):
        grid = np.concatenate([grid, [total]])
    out = np.empty((grid.shape[0], chunk.n_joints))
    for j in range(chunk.n_joints):
        out[:, j] = np.interp(grid, times, chunk.waypoints[:, j])
    out[-1] = chunk.waypoints[-1]
    return out
