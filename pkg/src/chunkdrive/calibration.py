"""Delay calibration from a simulated sinusoidal sway recording.

The measurement rig mirrors a practical camera-based setup: the robot sways
one joint sinusoidally in front of a high-fps camera while a screen displays
three track bars (the phase of system time, the reported joint position, and
the commanded target position) next to an LED strip that encodes raw system
time. Each captured frame is reduced to one pixel row per signal; bump
centers are extracted with sub-pixel accuracy and a least-squares sinusoid
fit recovers each signal's phase to sub-frame precision.

From the fitted phases and the LED decode the four delays are separated:

- t_readout: frame delivery time minus claimed timestamp (direct).
- t_camera: claimed timestamp minus LED-decoded time at exposure.
- screen delay: system-time track-bar latency minus the LED latency
  (the screen adds its own display delay; the LED does not).
- t_proprio: reported-position phase lag behind the commanded bar, minus
  the plant's own motion lag as seen at the arm tip.
- t_motion: arm-tip phase lag behind the command, converted to seconds.
  A first-order lag is not a pure delay: at test frequency f its phase is
  arctan(2*pi*f*tau), so tau is additionally reported via the tangent
  inversion and is what the tracking optimizer consumes.

The same module provides the inference-time compensation: a history buffer
of reported joint readings from which the reading matching a frame's true
exposure time is retrieved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import scipy.signal

from .core import JointVector, TimingCalibration
from .plant_sim import PlantConfig

__all__ = [
    "RigConfig",
    "TrackbarFrame",
    "SwayRecording",
    "PhaseFit",
    "CalibrationError",
    "WeakSignalError",
    "CalibrationReport",
    "HistoryBuffer",
    "generate_sway",
    "record_sway",
    "estimate_phase",
    "calibrate_delays",
    "calibration_report",
    "align_observation",
]

BUMP_SIGMA = 2.0  # px
COM_HALF_WINDOW = 3  # center-of-mass window is 2*3+1 = 7 px
LED_BITS = 48
VALUE_RANGE = 1.25  # encoded values live in [-VALUE_RANGE, VALUE_RANGE]


class CalibrationError(RuntimeError):
    """Recording is unusable for delay calibration."""


class WeakSignalError(CalibrationError):
    """Fitted sinusoid amplitude is too small relative to the residual."""


@dataclass
class RigConfig:
    """Sway test configuration: motion, camera, and screen properties."""

    sway_freq: float = 0.5
    sway_amplitude: float = 0.3
    fps: float = 120.0
    duration: float = 30.0
    warmup: float = 2.0
    width: int = 256
    screen_delay: float = 0.02
    pixel_noise_std: float = 0.0
    sway_joint: int = 0
    sim_rate: float = 480.0

    def __post_init__(self) -> None:
        if self.sway_freq <= 0:
            raise ValueError("sway_freq must be positive")
        if self.fps < 2.0 * self.sway_freq * 10.0:
            raise ValueError("fps must oversample the sway by at least 10x Nyquist")
        if self.duration * self.sway_freq < 10.0:
            raise ValueError("recording must span at least 10 sway cycles")
        if self.width < 64:
            raise ValueError("width must be at least 64 px")


@dataclass
class TrackbarFrame:
    """One reduced camera frame.

    ``row`` is (W, 3): channel 0 the system-time phase bar, channel 1 the
    reported joint position bar, channel 2 the commanded target bar (all on
    the screen, hence behind by the screen delay). ``arm_row`` images the
    physical arm tip and ``led_row`` the LED strip; both bypass the screen.
    """

    claimed_timestamp: float
    delivery_timestamp: float
    row: np.ndarray
    arm_row: np.ndarray
    led_row: np.ndarray


@dataclass
class SwayRecording:
    frames: list
    sway_freq: float
    sway_amplitude: float
    fps: float
    led_log: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.led_log is None and self.frames:
            self.led_log = np.array([decode_led_row(f.led_row) for f in self.frames])

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "sway_freq": self.sway_freq,
                "sway_amplitude": self.sway_amplitude,
                "fps": self.fps,
            }
            fh.write(json.dumps(header) + "\n")
            for f in self.frames:
                rec = {
                    "claimed": f.claimed_timestamp,
                    "delivery": f.delivery_timestamp,
                    "row": [list(map(float, f.row[:, c])) for c in range(3)],
                    "arm_row": list(map(float, f.arm_row)),
                    "led_row": list(map(float, f.led_row)),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "SwayRecording":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            frames = []
            for line in fh:
                rec = json.loads(line)
                frames.append(
                    TrackbarFrame(
                        claimed_timestamp=rec["claimed"],
                        delivery_timestamp=rec["delivery"],
                        row=np.array(rec["row"]).T,
                        arm_row=np.array(rec["arm_row"]),
                        led_row=np.array(rec["led_row"]),
                    )
                )
        return cls(frames=frames, **header)


def generate_sway(
    t: float, freq: float, amplitude: float, n_joints: int = 7, joint: int = 0
) -> JointVector:
    """Sway command at time t: one joint on a sinusoid, the rest at zero."""
    if freq <= 0:
        raise ValueError("freq must be positive")
    out = np.zeros(n_joints)
    out[joint] = amplitude * math.sin(2.0 * math.pi * freq * t)
    return out


# -- frame synthesis -------------------------------------------------------


def render_bump(value: float, width: int) -> np.ndarray:
    """Unit-amplitude Gaussian bump whose center encodes `value`."""
    center = (value / VALUE_RANGE + 1.0) * 0.5 * (width - 1)
    px = np.arange(width)
    return np.exp(-0.5 * ((px - center) / BUMP_SIGMA) ** 2)


def _matched_kernel() -> np.ndarray:
    kernel = np.exp(-0.5 * (np.arange(-6, 7) / BUMP_SIGMA) ** 2)
    return kernel / kernel.sum()


def _com_around(smooth_row: np.ndarray, idx: int) -> float:
    width = smooth_row.shape[0]
    lo = max(idx - COM_HALF_WINDOW, 0)
    hi = min(idx + COM_HALF_WINDOW + 1, width)
    window = smooth_row[lo:hi] - smooth_row[lo:hi].min()
    total = window.sum()
    if total <= 0:
        return float(idx)
    return float((np.arange(lo, hi) * window).sum() / total)


def decode_bump_center(row: np.ndarray) -> float:
    """Sub-pixel bump center: matched-filter argmax + 7-px center of mass."""
    kernel = _matched_kernel()
    smooth = np.convolve(row, kernel, mode="same")
    return _com_around(smooth, int(np.argmax(smooth)))


def track_bump_centers(rows: np.ndarray, search_radius: int = 14) -> np.ndarray:
    """Bump centers for a stack of rows (F, W), tracked across frames.

    Rows are first averaged over a short symmetric window of neighboring
    frames; a symmetric temporal kernel has zero phase delay, so it cannot
    bias the timing estimates, while it strongly suppresses pixel noise.
    At camera frame rates the bump moves a few pixels per frame, so after a
    robust initialization the argmax search is confined to a window around
    the previous center; this keeps additive pixel noise from teleporting
    the detection.
    """
    if rows.shape[0] >= 5:
        rows = scipy.ndimage.convolve1d(rows, np.full(5, 0.2), axis=0, mode="nearest")
    smooth = scipy.ndimage.convolve1d(rows, _matched_kernel(), axis=1, mode="nearest")
    n_frames, width = smooth.shape
    centers = np.empty(n_frames)
    init = int(np.argmax(np.mean(smooth[: min(3, n_frames)], axis=0)))
    prev = init
    for i in range(n_frames):
        lo = max(prev - search_radius, 0)
        hi = min(prev + search_radius + 1, width)
        idx = lo + int(np.argmax(smooth[i, lo:hi]))
        centers[i] = _com_around(smooth[i], idx)
        prev = int(round(centers[i]))
    return centers


def bump_center_to_value(center: float, width: int) -> float:
    return (center / (width - 1) * 2.0 - 1.0) * VALUE_RANGE


def encode_led_row(t: float, width: int) -> np.ndarray:
    """Binary LED strip encoding of time in microseconds (stand-in scheme)."""
    cell = width // LED_BITS
    micros = int(round(t * 1e6))
    row = np.zeros(width)
    for b in range(LED_BITS):
        if micros >> b & 1:
            row[b * cell : (b + 1) * cell] = 1.0
    return row


def decode_led_row(row: np.ndarray) -> float:
    cell = row.shape[0] // LED_BITS
    micros = 0
    for b in range(LED_BITS):
        if float(np.mean(row[b * cell : (b + 1) * cell])) > 0.5:
            micros |= 1 << b
    return micros * 1e-6


def record_sway(plant: PlantConfig, rig: RigConfig, seed: int = 0) -> SwayRecording:
    """Simulate the sway test end to end and return the reduced frames.

    The plant is driven at `rig.sim_rate` with the sinusoidal command; the
    proprioceptive stream, screen contents, arm tip, and LED strip are
    rendered into each frame with the configured delays applied.
    """
    rng = np.random.default_rng((seed, 97))
    h = 1.0 / rig.sim_rate
    total = rig.warmup + rig.duration + 0.5
    n = int(round(total / h))
    t_cmd = np.arange(n) * h  # command issue times
    amp = rig.sway_amplitude
    omega = 2.0 * math.pi * rig.sway_freq
    y = amp * np.sin(omega * t_cmd)
    y = np.clip(y, plant.q_min[rig.sway_joint], plant.q_max[rig.sway_joint])

    a = math.exp(-h / plant.tau)
    # q_{k+1} = a q_k + (1-a) y_k, q_0 = 0
    q_next = scipy.signal.lfilter([1.0 - a], [1.0, -a], y)
    t_q = np.concatenate([[0.0], t_cmd + h])
    q = np.concatenate([[0.0], q_next])

    noise = rng.normal(0.0, plant.proprio_noise_std, q.shape[0])
    reported = q + noise
    t_report_avail = t_q + plant.t_proprio  # delivery times of readings

    first_claim = rig.warmup + plant.t_camera + rig.screen_delay + plant.t_proprio + 0.1
    n_frames = int(rig.duration * rig.fps)
    claimed = first_claim + np.arange(n_frames) / rig.fps
    exposure = claimed - plant.t_camera
    screen_t = exposure - rig.screen_delay

    # Values shown / imaged at each frame
    ch_time = np.sin(omega * screen_t)  # phase-of-system-time bar, unit amp
    idx_rep = np.searchsorted(t_report_avail, screen_t, side="right") - 1
    ch_reported = reported[np.clip(idx_rep, 0, None)] / amp
    idx_cmd = np.searchsorted(t_cmd, screen_t, side="right") - 1
    ch_command = y[np.clip(idx_cmd, 0, None)] / amp
    arm = np.interp(exposure, t_q, q) / amp

    frames = []
    for i in range(n_frames):
        row = np.stack(
            [
                render_bump(ch_time[i], rig.width),
                render_bump(ch_reported[i], rig.width),
                render_bump(ch_command[i], rig.width),
            ],
            axis=1,
        )
        arm_row = render_bump(arm[i], rig.width)
        led_row = encode_led_row(exposure[i], rig.width)
        if rig.pixel_noise_std > 0:
            row = row + rng.normal(0.0, rig.pixel_noise_std, row.shape)
            arm_row = arm_row + rng.normal(0.0, rig.pixel_noise_std, arm_row.shape)
            led_row = led_row + rng.normal(0.0, rig.pixel_noise_std, led_row.shape)
        frames.append(
            TrackbarFrame(
                claimed_timestamp=float(claimed[i]),
                delivery_timestamp=float(claimed[i] + plant.t_readout),
                row=row,
                arm_row=arm_row,
                led_row=led_row,
            )
        )
    return SwayRecording(
        frames=frames, sway_freq=rig.sway_freq, sway_amplitude=amp, fps=rig.fps
    )


# -- phase estimation -------------------------------------------------------


@dataclass
class PhaseFit:
    phase: float  # radians, in (-pi, pi]
    amplitude: float
    offset: float
    residual_rms: float


def estimate_phase(values, timestamps, freq: float) -> PhaseFit:
    """Least-squares fit of c*sin(2*pi*freq*t + phi) + d.

    Linear in (alpha, beta, d) via the sin/cos basis; exact on noiseless
    data. Raises :class:`WeakSignalError` when the fitted amplitude is
    below three times the residual RMS.
    """
    values = np.asarray(values, dtype=float)
    timestamps = np.asarray(timestamps, dtype=float)
    if values.shape != timestamps.shape or values.ndim != 1:
        raise ValueError("values and timestamps must be matching 1-D arrays")
    span_cycles = (timestamps.max() - timestamps.min()) * freq
    if span_cycles < 3.0:
        raise CalibrationError(f"need >= 3 sway cycles, got {span_cycles:.2f}")
    omega = 2.0 * math.pi * freq
    basis = np.stack([np.sin(omega * timestamps), np.cos(omega * timestamps),
                      np.ones_like(timestamps)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, values, rcond=None)
    alpha, beta, offset = coef
    amplitude = math.hypot(alpha, beta)
    residual = values - basis @ coef
    rms = float(np.sqrt(np.mean(residual**2)))
    if amplitude < 3.0 * rms:
        raise WeakSignalError(
            f"signal too weak: amplitude {amplitude:.3g} < 3 x residual {rms:.3g}"
        )
    phase = math.atan2(beta, alpha)
    return PhaseFit(phase=phase, amplitude=amplitude, offset=float(offset), residual_rms=rms)


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class CalibrationReport:
    calibration: TimingCalibration
    screen_delay: float
    channel_phases: dict
    residual_rms: dict


def calibration_report(recording: SwayRecording) -> CalibrationReport:
    """Full delay separation from a sway recording (see module docstring)."""
    frames = recording.frames
    if not frames:
        raise CalibrationError("empty recording")
    widths = {f.row.shape for f in frames}
    if widths != {frames[0].row.shape} or frames[0].row.ndim != 2 or frames[0].row.shape[1] != 3:
        raise CalibrationError("frames must carry a (W, 3) trackbar row")
    claimed = np.array([f.claimed_timestamp for f in frames])
    delivery = np.array([f.delivery_timestamp for f in frames])
    dts = np.diff(claimed)
    if np.max(np.abs(dts - 1.0 / recording.fps)) > 0.25 / recording.fps:
        raise CalibrationError("inconsistent frame spacing vs declared fps")

    t_readout = float(np.mean(delivery - claimed))

    led = recording.led_log
    if led is None or len(led) != len(frames):
        led = np.array([decode_led_row(f.led_row) for f in frames])
    cam_lat = claimed - led
    med = np.median(cam_lat)
    mad = np.median(np.abs(cam_lat - med)) + 1e-9
    keep = np.abs(cam_lat - med) < 6.0 * mad + 1e-6
    t_camera = float(np.mean(cam_lat[keep]))

    width = frames[0].row.shape[0]
    omega = 2.0 * math.pi * recording.sway_freq

    def channel_values(getter):
        rows = np.stack([getter(f) for f in frames], axis=0)
        centers = track_bump_centers(rows)
        return (centers / (width - 1) * 2.0 - 1.0) * VALUE_RANGE

    def robust_fit(values):
        fit = estimate_phase(values, claimed, recording.sway_freq)
        omega_f = 2.0 * math.pi * recording.sway_freq
        model = fit.amplitude * np.sin(omega_f * claimed + fit.phase) + fit.offset
        resid = values - model
        keep_f = np.abs(resid) < 4.0 * max(fit.residual_rms, 1e-12)
        if np.sum(~keep_f) == 0 or np.sum(keep_f) < 0.5 * len(values):
            return fit
        return estimate_phase(values[keep_f], claimed[keep_f], recording.sway_freq)

    fits = {
        "time_bar": robust_fit(channel_values(lambda f: f.row[:, 0])),
        "reported": robust_fit(channel_values(lambda f: f.row[:, 1])),
        "command": robust_fit(channel_values(lambda f: f.row[:, 2])),
        "arm": robust_fit(channel_values(lambda f: f.arm_row)),
    }

    # Latency of a channel = -phase / omega (a delayed signal has negative
    # fitted phase). All channels share the sway as ground truth.
    lat_time_bar = -_wrap(fits["time_bar"].phase) / omega
    lat_reported = -_wrap(fits["reported"].phase) / omega
    lat_command = -_wrap(fits["command"].phase) / omega
    lat_arm = -_wrap(fits["arm"].phase) / omega

    screen_delay = lat_time_bar - t_camera
    t_motion = lat_arm - t_camera
    t_proprio = (lat_reported - lat_command) - t_motion

    motion_phase = omega * t_motion
    if motion_phase >= math.pi / 2:
        raise CalibrationError("motion phase lag exceeds a quarter cycle; lower sway_freq")
    tau = max(math.tan(max(motion_phase, 0.0)) / omega, 1e-9)

    calib = TimingCalibration(
        t_readout=max(t_readout, 0.0),
        t_camera=max(t_camera, 0.0),
        t_proprio=max(t_proprio, 0.0),
        t_motion=max(t_motion, 0.0),
        tau=tau,
    )
    return CalibrationReport(
        calibration=calib,
        screen_delay=screen_delay,
        channel_phases={k: f.phase for k, f in fits.items()},
        residual_rms={k: f.residual_rms for k, f in fits.items()},
    )


def calibrate_delays(recording: SwayRecording) -> TimingCalibration:
    return calibration_report(recording).calibration


# -- observation alignment ---------------------------------------------------


class HistoryBuffer:
    """Ring of (report timestamp, joint reading) with strictly increasing times."""

    def __init__(self, span: float = 2.0) -> None:
        if span <= 0:
            raise ValueError("span must be positive")
        self.span = span
        self._times: list[float] = []
        self._values: list[np.ndarray] = []

    def append(self, timestamp: float, value: JointVector) -> None:
        if self._times and timestamp <= self._times[-1]:
            raise ValueError("timestamps must be strictly increasing")
        self._times.append(float(timestamp))
        self._values.append(np.asarray(value, dtype=float).copy())
        horizon = timestamp - self.span
        while len(self._times) > 2 and self._times[1] < horizon:
            self._times.pop(0)
            self._values.pop(0)

    def __len__(self) -> int:
        return len(self._times)

    @property
    def times(self) -> np.ndarray:
        return np.array(self._times)

    @property
    def newest(self) -> tuple[float, np.ndarray]:
        return self._times[-1], self._values[-1]

    def values_matrix(self) -> np.ndarray:
        return np.stack(self._values, axis=0)


def align_observation(
    buffer: HistoryBuffer, calib: TimingCalibration, frame_delivery_time: float
) -> JointVector:
    """Joint reading matching a frame's true exposure time.

    The frame delivered at `frame_delivery_time` was exposed
    t_readout + t_camera earlier; readings reported at time t were sampled
    at t - t_proprio. Linear interpolation between the two readings whose
    sample times bracket the exposure.
    """
    if len(buffer) == 0:
        raise CalibrationError("insufficient history: buffer empty")
    exposure = frame_delivery_time - calib.t_readout - calib.t_camera
    sample_times = buffer.times - calib.t_proprio
    if exposure < sample_times[0] - 1e-9:
        raise CalibrationError(
            f"insufficient history: need sample at {exposure:.4f}s, "
            f"oldest is {sample_times[0]:.4f}s"
        )
    values = buffer.values_matrix()
    out = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        out[j] = np.interp(exposure, sample_times, values[:, j])
    return out
