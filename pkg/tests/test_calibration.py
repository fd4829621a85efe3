import math
import time

import numpy as np
import pytest

from chunkdrive.calibration import (
    CalibrationError,
    HistoryBuffer,
    RigConfig,
    SwayRecording,
    WeakSignalError,
    align_observation,
    calibrate_delays,
    calibration_report,
    decode_bump_center,
    decode_led_row,
    encode_led_row,
    estimate_phase,
    generate_sway,
    record_sway,
    render_bump,
)
from chunkdrive.core import TimingCalibration
from chunkdrive.plant_sim import PlantConfig

PAPER_TABLE = dict(t_readout=0.033, t_camera=0.055, t_proprio=0.050, tau=0.15)


def table_plant(**overrides):
    cfg = dict(PAPER_TABLE, n_joints=2, proprio_noise_std=1e-4, rng_seed=0)
    cfg.update(overrides)
    return PlantConfig(**cfg)


class TestSway:
    def test_zero_at_origin(self):
        assert generate_sway(0.0, 0.5, 0.3)[0] == 0.0

    def test_quarter_period(self):
        v = generate_sway(0.5, 0.5, 0.3)
        assert v[0] == pytest.approx(0.3)

    def test_periodicity(self):
        for t in [0.1, 0.37, 1.9]:
            a = generate_sway(t, 0.5, 0.3)[0]
            b = generate_sway(t + 2.0, 0.5, 0.3)[0]
            assert abs(a - b) < 1e-12

    def test_other_joints_zero(self):
        v = generate_sway(0.3, 0.5, 0.3, n_joints=7, joint=2)
        assert np.all(v[np.arange(7) != 2] == 0.0)


class TestBumpCodec:
    def test_roundtrip(self):
        from chunkdrive.calibration import bump_center_to_value

        for value in [-1.0, -0.33, 0.0, 0.5, 1.2]:
            row = render_bump(value, 256)
            center = decode_bump_center(row)
            assert bump_center_to_value(center, 256) == pytest.approx(value, abs=2e-3)

    def test_led_roundtrip(self):
        for t in [0.0, 1.234567, 35.000001, 3601.5]:
            row = encode_led_row(t, 256)
            assert decode_led_row(row) == pytest.approx(t, abs=1e-6)


class TestEstimatePhase:
    def test_exact_on_clean_sinusoid(self):
        t = np.arange(0, 10, 1 / 50)
        for phi in [-2.0, 0.0, 0.4, 3.0]:
            values = 0.7 * np.sin(2 * np.pi * 0.5 * t + phi) + 0.1
            fit = estimate_phase(values, t, 0.5)
            err = abs((fit.phase - phi + np.pi) % (2 * np.pi) - np.pi)
            assert err < 1e-9
            assert fit.amplitude == pytest.approx(0.7, abs=1e-9)
            assert fit.offset == pytest.approx(0.1, abs=1e-9)

    def test_shifted_series_phase(self):
        # a 50 ms delay at 0.5 Hz shows up as -2*pi*0.5*0.05 rad
        t = np.arange(0, 20, 1 / 120)
        values = np.sin(2 * np.pi * 0.5 * (t - 0.05))
        fit = estimate_phase(values, t, 0.5)
        assert fit.phase == pytest.approx(-2 * np.pi * 0.5 * 0.05, abs=2 * np.pi * 0.5 * 0.005)

    def test_scale_and_offset_invariance(self):
        t = np.arange(0, 12, 1 / 60)
        base = np.sin(2 * np.pi * 0.5 * t + 0.3)
        f1 = estimate_phase(base, t, 0.5)
        f2 = estimate_phase(5.0 * base + 2.0, t, 0.5)
        assert f1.phase == pytest.approx(f2.phase, abs=1e-12)

    def test_noise_robustness_monte_carlo(self):
        # pixel-level noise per frame, 10 cycles at 120 fps
        rng = np.random.default_rng(0)
        t = np.arange(0, 20, 1 / 120)
        errs = []
        for _ in range(100):
            values = np.sin(2 * np.pi * 0.5 * t) + rng.normal(0, 0.02, t.shape)
            fit = estimate_phase(values, t, 0.5)
            errs.append(abs(fit.phase))
        assert max(errs) < 0.01

    def test_too_few_cycles(self):
        t = np.arange(0, 2, 1 / 100)
        with pytest.raises(CalibrationError):
            estimate_phase(np.sin(2 * np.pi * 0.5 * t), t, 0.5)

    def test_weak_signal(self):
        rng = np.random.default_rng(1)
        t = np.arange(0, 10, 1 / 100)
        with pytest.raises(WeakSignalError):
            estimate_phase(rng.normal(0, 1.0, t.shape), t, 0.5)


class TestCalibrateDelays:
    def test_recovers_table_delays(self):
        recording = record_sway(table_plant(), RigConfig(duration=24.0), seed=1)
        calib = calibrate_delays(recording)
        assert calib.t_readout == pytest.approx(0.033, abs=0.005)
        assert calib.t_camera == pytest.approx(0.055, abs=0.005)
        assert calib.t_proprio == pytest.approx(0.050, abs=0.005)
        assert calib.tau == pytest.approx(0.15, rel=0.10)

    def test_zero_delay_plant(self):
        plant = table_plant(
            t_readout=0.0, t_camera=0.0, t_proprio=0.0, tau=1e-4, proprio_noise_std=0.0
        )
        calib = calibrate_delays(record_sway(plant, RigConfig(duration=24.0), seed=2))
        assert abs(calib.t_readout) < 0.002
        assert abs(calib.t_camera) < 0.002
        assert abs(calib.t_proprio) < 0.002
        assert abs(calib.t_motion) < 0.003

    def test_lag_phase_vs_pure_delay(self):
        # first-order lag at 0.5 Hz: phase arctan(2*pi*0.5*0.15) = 0.440 rad,
        # i.e. an effective motion delay of 0.140 s, not 0.150 s
        recording = record_sway(table_plant(proprio_noise_std=0.0), RigConfig(duration=24.0), seed=3)
        report = calibration_report(recording)
        expected_phase = math.atan(2 * math.pi * 0.5 * 0.15)
        expected_t_motion = expected_phase / (2 * math.pi * 0.5)
        assert expected_t_motion == pytest.approx(0.140, abs=5e-4)
        assert report.calibration.t_motion == pytest.approx(expected_t_motion, abs=0.004)

    def test_screen_delay_separated(self):
        rig = RigConfig(duration=24.0, screen_delay=0.035)
        report = calibration_report(record_sway(table_plant(), rig, seed=4))
        assert report.screen_delay == pytest.approx(0.035, abs=0.004)
        # screen delay must not leak into the camera estimate
        assert report.calibration.t_camera == pytest.approx(0.055, abs=0.005)

    def test_accuracy_over_seeds(self):
        errs = {"t_readout": [], "t_camera": [], "t_proprio": []}
        for seed in range(6):
            calib = calibrate_delays(record_sway(table_plant(rng_seed=seed), RigConfig(duration=20.0), seed=seed))
            errs["t_readout"].append(abs(calib.t_readout - 0.033))
            errs["t_camera"].append(abs(calib.t_camera - 0.055))
            errs["t_proprio"].append(abs(calib.t_proprio - 0.050))
        for name, es in errs.items():
            assert max(es) < 0.005, f"{name} error {max(es)}"

    def test_pixel_noise_tolerated(self):
        rig = RigConfig(duration=24.0, pixel_noise_std=0.5)
        calib = calibrate_delays(record_sway(table_plant(), rig, seed=5))
        assert calib.t_proprio == pytest.approx(0.050, abs=0.005)
        assert calib.t_camera == pytest.approx(0.055, abs=0.005)

    def test_inconsistent_fps_rejected(self):
        recording = record_sway(table_plant(), RigConfig(duration=24.0), seed=6)
        recording.frames[10].claimed_timestamp += 0.02
        with pytest.raises(CalibrationError):
            calibrate_delays(recording)

    def test_empty_recording_rejected(self):
        with pytest.raises(CalibrationError):
            calibrate_delays(SwayRecording(frames=[], sway_freq=0.5, sway_amplitude=0.3, fps=120))


class TestRigConfigValidation:
    def test_fps_oversampling(self):
        with pytest.raises(ValueError):
            RigConfig(sway_freq=10.0, fps=120.0)

    def test_min_cycles(self):
        with pytest.raises(ValueError):
            RigConfig(duration=5.0)


class TestRecordingSerialization:
    def test_jsonl_roundtrip(self, tmp_path):
        plant = table_plant()
        rig = RigConfig(duration=20.0, fps=30.0, sway_freq=1.0)
        rec = record_sway(plant, rig, seed=0)
        rec.frames = rec.frames[:40]
        rec.led_log = rec.led_log[:40]
        path = tmp_path / "sway.jsonl"
        rec.to_jsonl(path)
        back = SwayRecording.from_jsonl(path)
        assert back.fps == rec.fps
        assert len(back.frames) == 40
        np.testing.assert_allclose(back.frames[7].row, rec.frames[7].row)
        np.testing.assert_allclose(back.frames[7].arm_row, rec.frames[7].arm_row)
        assert back.frames[7].claimed_timestamp == rec.frames[7].claimed_timestamp


class TestHistoryBuffer:
    def test_strictly_increasing(self):
        buf = HistoryBuffer()
        buf.append(0.0, np.zeros(2))
        with pytest.raises(ValueError):
            buf.append(0.0, np.zeros(2))

    def test_eviction(self):
        buf = HistoryBuffer(span=1.0)
        for k in range(300):
            buf.append(k * 0.01, np.array([k * 0.01]))
        assert buf.times[0] >= buf.times[-1] - 1.0 - 0.02


class TestAlignObservation:
    def cal(self, **kw):
        d = dict(t_readout=0.033, t_camera=0.055, t_proprio=0.05, t_motion=0.14, tau=0.15)
        d.update(kw)
        return TimingCalibration(**d)

    def test_zero_calibration_is_identity_on_newest(self):
        calib = self.cal(t_readout=0.0, t_camera=0.0, t_proprio=0.0)
        buf = HistoryBuffer()
        for k in range(10):
            buf.append(k * 0.01, np.array([float(k)]))
        out = align_observation(buf, calib, frame_delivery_time=0.09)
        assert out[0] == 9.0

    def test_paper_table_arithmetic(self):
        # delivery 1.000 -> exposure 0.912; reading reported at 0.962
        calib = self.cal()
        buf = HistoryBuffer()
        for k in range(200):
            t = k * 0.01
            buf.append(t, np.array([t - calib.t_proprio]))  # value = its sample time
        out = align_observation(buf, calib, frame_delivery_time=1.000)
        assert out[0] == pytest.approx(0.912, abs=1e-9)

    def test_ramp_alignment_against_plant(self):
        # on a ramp the aligned reading matches the true q at exposure
        from chunkdrive.plant_sim import PlantState, plant_step, read_proprio

        plant_cfg = table_plant(n_joints=1, proprio_noise_std=0.0, tau=0.01)
        state = PlantState(config=plant_cfg)
        # delays chosen so the exposure lands on the 10 ms step grid
        calib = self.cal(tau=0.01, t_readout=0.03, t_camera=0.06)
        buf = HistoryBuffer()
        h, slope = 0.01, 0.4
        truth = {}
        t = 0.0
        for _ in range(300):
            t += h
            plant_step(state, np.array([slope * t]), h=h)
            truth[round(t, 6)] = state.q[0]
            if state.now <= plant_cfg.t_proprio:
                continue
            ts, val = read_proprio(state)
            report_time = ts + plant_cfg.t_proprio
            if len(buf) == 0 or report_time > buf.newest[0]:
                buf.append(report_time, val)
        delivery = 2.5
        exposure = delivery - calib.t_readout - calib.t_camera
        out = align_observation(buf, calib, delivery)
        assert out[0] == pytest.approx(truth[round(exposure, 6)], abs=1e-4)

    def test_insufficient_history(self):
        buf = HistoryBuffer()
        buf.append(1.0, np.zeros(1))
        with pytest.raises(CalibrationError):
            align_observation(buf, self.cal(), frame_delivery_time=0.5)


def test_calibration_runtime_budget():
    start = time.perf_counter()
    calibrate_delays(record_sway(table_plant(), RigConfig(duration=20.0), seed=9))
    assert time.perf_counter() - start < 25.0
