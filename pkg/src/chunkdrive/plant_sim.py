"""Simulated robot plant: first-order-lag joints, delayed sensors, tasks.

The plant realizes commands through q' = a*q + (1-a)*y with a = exp(-h/tau),
which is the dominant behavior of a position-loop-controlled lightweight arm:
realized motion lags the issued command and attenuates abrupt changes. On a
ramp this lag looks like a constant time delay of roughly tau, which is how
the "motion delay" of the real system emerges here rather than being an
independent parameter.

Sensors are delayed: proprioceptive readings of q are delivered t_proprio
after they are sampled (with additive Gaussian noise), and camera frames
expose t_camera before their claimed timestamp and arrive t_readout after it.

Synthetic tasks carry a dense reference path plus precision windows - path
segments where execution can fail, with a failure probability that grows
with tracking error and speed. Everything is seeded and bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Clock, JointVector, as_joint_vector

__all__ = [
    "PlantConfig",
    "PlantState",
    "Frame",
    "PrecisionWindow",
    "TaskScript",
    "FailureEvent",
    "NoReadingError",
    "plant_step",
    "read_proprio",
    "capture_frame",
    "evaluate_step",
    "make_default_task",
]

HISTORY_SPAN = 2.0  # seconds of state history kept for frame exposure lookups


class NoReadingError(RuntimeError):
    """No proprioceptive reading has been delivered yet."""


def _per_joint(value, n_joints: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n_joints, float(arr))
    return as_joint_vector(arr, n_joints)


@dataclass
class PlantConfig:
    tau: float = 0.15
    t_camera: float = 0.055
    t_readout: float = 0.033
    t_proprio: float = 0.050
    n_joints: int = 7
    q_min: np.ndarray | float = -2.8
    q_max: np.ndarray | float = 2.8
    v_max_hw: np.ndarray | float = 2.6
    a_max_hw: np.ndarray | float = 65.0
    jerk_max_hw: np.ndarray | float = 2600.0
    proprio_noise_std: float = 1e-4
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("t_camera", "t_readout", "t_proprio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.q_min = _per_joint(self.q_min, self.n_joints)
        self.q_max = _per_joint(self.q_max, self.n_joints)
        self.v_max_hw = _per_joint(self.v_max_hw, self.n_joints)
        self.a_max_hw = _per_joint(self.a_max_hw, self.n_joints)
        self.jerk_max_hw = _per_joint(self.jerk_max_hw, self.n_joints)
        if not np.all(self.q_min < self.q_max):
            raise ValueError("q_min must be < q_max")
        if not (np.all(np.isfinite(self.q_min)) and np.all(np.isfinite(self.q_max))):
            raise ValueError("joint limits must be finite")


@dataclass
class PlantState:
    """Mutable simulated robot state; single-owner, stepped by one loop."""

    config: PlantConfig
    q: JointVector = None
    clock: Clock = None
    proprio_queue: list = field(default_factory=list)  # (delivery_t, sample_t, value)
    q_history: list = field(default_factory=list)  # (t, q) for exposure lookback
    rng: np.random.Generator = None
    failure_rng: np.random.Generator = None

    def __post_init__(self) -> None:
        if self.q is None:
            self.q = np.zeros(self.config.n_joints)
        self.q = as_joint_vector(self.q, self.config.n_joints)
        if self.clock is None:
            self.clock = Clock("simulated")
        if self.rng is None:
            self.rng = np.random.default_rng((self.config.rng_seed, 1))
        if self.failure_rng is None:
            self.failure_rng = np.random.default_rng((self.config.rng_seed, 2))
        if not self.q_history:
            self.q_history.append((self.clock.now(), self.q.copy()))
        self._emit_proprio(self.clock.now())

    @property
    def now(self) -> float:
        return self.clock.now()

    def _emit_proprio(self, t: float) -> None:
        noise = self.rng.normal(0.0, 1.0, self.config.n_joints) * self.config.proprio_noise_std
        self.proprio_queue.append((t + self.config.t_proprio, t, self.q + noise))

    def _trim(self) -> None:
        horizon = self.now - HISTORY_SPAN
        while len(self.q_history) > 2 and self.q_history[1][0] < horizon:
            self.q_history.pop(0)
        while len(self.proprio_queue) > 2 and self.proprio_queue[1][0] < horizon:
            self.proprio_queue.pop(0)

    def q_at(self, t: float) -> JointVector:
        """True joint position at time t (linear interpolation of history)."""
        hist = self.q_history
        if t <= hist[0][0]:
            return hist[0][1].copy()
        if t >= hist[-1][0]:
            return hist[-1][1].copy()
        times = [h[0] for h in hist]
        i = int(np.searchsorted(times, t)) - 1
        t0, q0 = hist[i]
        t1, q1 = hist[i + 1]
        w = (t - t0) / (t1 - t0)
        return q0 + w * (q1 - q0)


@dataclass
class Frame:
    """Camera frame timing plus the true state at exposure.

    ``claimed_timestamp`` is what the camera driver stamps; the exposure
    happened t_camera earlier and the consumer receives the frame t_readout
    later. Rendering of visual content is done by the calibration rig.
    """

    claimed_timestamp: float
    delivery_timestamp: float
    exposure_time: float
    q_at_exposure: JointVector


def plant_step(state: PlantState, command: JointVector, h: float) -> PlantState:
    """Advance the plant by h seconds under a held position command.

    The command is clamped to joint limits at the input (firmware-style),
    then q' = a*q + (1-a)*y_clamped with a = exp(-h/tau). Schedules the
    proprioceptive emission for the new sample. Raises on invalid input
    with the state unchanged.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    command = np.asarray(command, dtype=float)
    if command.shape != (state.config.n_joints,) or not np.all(np.isfinite(command)):
        raise ValueError("command must be a finite joint vector")
    a = math.exp(-h / state.config.tau)
    y = np.clip(command, state.config.q_min, state.config.q_max)
    state.q = a * state.q + (1.0 - a) * y
    t = state.clock.tick(h)
    state.q_history.append((t, state.q.copy()))
    state._emit_proprio(t)
    state._trim()
    return state


def read_proprio(state: PlantState) -> tuple[float, JointVector]:
    """Newest delivered joint reading: (sample timestamp, noisy value).

    A reading sampled at time t becomes available at t + t_proprio.
    """
    now = state.now
    newest = None
    for delivery, sample_t, value in reversed(state.proprio_queue):
        if delivery <= now + 1e-12:
            newest = (sample_t, value)
            break
    if newest is None:
        raise NoReadingError("no proprioceptive reading delivered yet")
    return newest[0], newest[1].copy()


def capture_frame(state: PlantState) -> Frame:
    """Stamp a frame now; exposure content is the state t_camera ago."""
    cfg = state.config
    claimed = state.now
    exposure = claimed - cfg.t_camera
    return Frame(
        claimed_timestamp=claimed,
        delivery_timestamp=claimed + cfg.t_readout,
        exposure_time=exposure,
        q_at_exposure=state.q_at(exposure),
    )


@dataclass
class PrecisionWindow:
    start: float  # progress fraction
    end: float
    tolerance: float  # radians of tracking error treated as "on target"
    speed_sensitivity: float  # failure-rate gain kappa

    def __post_init__(self) -> None:
        if not (0.0 <= self.start < self.end <= 1.0):
            raise ValueError("window fractions must satisfy 0 <= start < end <= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class TaskScript:
    """Synthetic task: a dense 1x reference path plus precision windows."""

    times: np.ndarray  # (K,) demo-time grid, [0, total_duration_1x]
    positions: np.ndarray  # (K, J)
    precision_windows: list
    total_duration_1x: float
    failure_beta: float = 0.5

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.times.ndim != 1 or self.positions.shape[0] != self.times.shape[0]:
            raise ValueError("times/positions mismatch")
        spans = [(w.start, w.end) for w in self.precision_windows]
        for (s0, e0), (s1, e1) in zip(sorted(spans), sorted(spans)[1:]):
            if s1 < e0:
                raise ValueError("precision windows must not overlap")

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    def sample(self, demo_time: float) -> JointVector:
        """Reference position at a 1x demo time (clamped to the path ends)."""
        t = min(max(demo_time, self.times[0]), self.times[-1])
        out = np.empty(self.n_joints)
        for j in range(self.n_joints):
            out[j] = np.interp(t, self.times, self.positions[:, j])
        return out

    def sample_fraction(self, progress: float) -> JointVector:
        return self.sample(progress * self.total_duration_1x)

    def window_at(self, progress: float) -> int | None:
        for i, w in enumerate(self.precision_windows):
            if w.start <= progress <= w.end:
                return i
        return None

    def distance_to_window(self, progress: float) -> float:
        """Progress-fraction distance to the nearest window (0 if inside)."""
        best = np.inf
        for w in self.precision_windows:
            if w.start <= progress <= w.end:
                return 0.0
            best = min(best, abs(progress - w.start), abs(progress - w.end))
        return float(best)


@dataclass
class FailureEvent:
    time: float
    progress_fraction: float
    window_index: int | None

    def __post_init__(self) -> None:
        if not (0.0 <= self.progress_fraction <= 1.0):
            raise ValueError("progress_fraction must lie in [0, 1]")


def failure_probability(
    task: TaskScript, progress: float, tracking_error: float, speed_scale: float, h: float
) -> float:
    """Per-step failure probability; zero outside precision windows."""
    idx = task.window_at(progress)
    if idx is None:
        return 0.0
    w = task.precision_windows[idx]
    excess = tracking_error / w.tolerance - 1.0 + task.failure_beta * (speed_scale - 1.0)
    if excess <= 0.0:
        return 0.0
    return 1.0 - math.exp(-h * w.speed_sensitivity * excess)


def evaluate_step(
    state: PlantState,
    task: TaskScript,
    progress: float,
    tracking_error: float,
    speed_scale: float,
    h: float,
) -> FailureEvent | None:
    """Roll the failure dice for one control step.

    Inside a precision window the failure hazard grows with tracking error
    beyond the window tolerance and with execution speed above 1x; outside
    windows execution never fails.
    """
    if not (0.0 <= progress <= 1.0):
        raise ValueError("progress must lie in [0, 1]")
    idx = task.window_at(progress)
    if idx is None:
        return None
    p = failure_probability(task, progress, tracking_error, speed_scale, h)
    if p > 0.0 and state.failure_rng.random() < p:
        return FailureEvent(time=state.now, progress_fraction=progress, window_index=idx)
    return None


def make_default_task(
    n_joints: int = 7,
    total_duration_1x: float = 8.0,
    seed: int = 7,
    windows: list | None = None,
    failure_beta: float = 0.5,
) -> TaskScript:
    """Smooth multi-joint demonstration path with two precision windows.

    Each joint follows a low-frequency sum of sinusoids (seeded), scaled to
    stay well inside default joint limits; the last joint acts as a gripper
    that closes during the precision windows.
    """
    rng = np.random.default_rng(seed)
    k = int(total_duration_1x * 100) + 1
    t = np.linspace(0.0, total_duration_1x, k)
    pos = np.zeros((k, n_joints))
    for j in range(max(n_joints - 1, 1)):
        a1 = 0.35 + 0.25 * rng.random()
        a2 = 0.10 + 0.10 * rng.random()
        f1 = 0.8 + 0.6 * rng.random()
        f2 = 1.6 + 0.8 * rng.random()
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        base = a1 * np.sin(2 * np.pi * f1 * t / total_duration_1x + p1)
        base += a2 * np.sin(2 * np.pi * f2 * t / total_duration_1x + p2)
        pos[:, j] = base - base[0]
    if windows is None:
        windows = [
            PrecisionWindow(0.30, 0.345, tolerance=0.015, speed_sensitivity=4.0),
            PrecisionWindow(0.62, 0.665, tolerance=0.015, speed_sensitivity=4.0),
        ]
    if n_joints >= 2:
        # gripper closes over each precision window: flat-topped plateau
        # covering the window, with gentle ramps completing just outside
        # the edges (inside the approach/exit phases), so the gripper value
        # is constant inside windows and the ramp speeds stay trackable
        frac = t / total_duration_1x
        grip = np.zeros(k)
        for w in windows:
            rise = 1.0 / (1.0 + np.exp(-(frac - (w.start - 0.02)) / 0.006))
            fall = 1.0 / (1.0 + np.exp(-((w.end + 0.02) - frac) / 0.006))
            grip = np.maximum(grip, 0.3 * rise * fall)
        pos[:, -1] = grip - grip[0]
    return TaskScript(
        times=t,
        positions=pos,
        precision_windows=list(windows),
        total_duration_1x=total_duration_1x,
        failure_beta=failure_beta,
    )
