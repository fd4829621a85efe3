import math

import numpy as np
import pytest

from chunkdrive.analysis import (
    SegmentLabel,
    SpeedupGeometry,
    classify_segments,
    failure_histogram,
    find_stall_speedup,
    max_speedup,
    profile_report,
    simulate_chunk_supply,
    usable_time,
)
from chunkdrive.core import Chunk
from chunkdrive.temporal_opt import TemporalParams, retime_chunk


class TestUsableTime:
    def test_reference_geometry(self):
        geom = SpeedupGeometry(1.0, 0.1, 0.25, speedup=1.0)
        assert usable_time(geom) == pytest.approx(0.65)

    def test_infinite_speed_asymptote(self):
        geom = SpeedupGeometry(1.0, 0.1, 0.25, speedup=1e9)
        assert usable_time(geom) == pytest.approx(-0.1, abs=1e-6)

    def test_max_speedup_formula(self):
        geom = SpeedupGeometry(1.0, 0.1, 0.25)
        assert max_speedup(geom) == pytest.approx(7.5)
        assert usable_time(SpeedupGeometry(1.0, 0.1, 0.25, speedup=7.5)) == pytest.approx(0.0, abs=1e-12)

    def test_degenerate_tail(self):
        geom = SpeedupGeometry(1.0, 0.1, 1.0)
        assert max_speedup(geom) == 0.0

    def test_strictly_decreasing_in_speedup_and_prefix(self):
        base = SpeedupGeometry(1.0, 0.1, 0.25)
        times = [usable_time(SpeedupGeometry(1.0, 0.1, 0.25, speedup=s))
                 for s in [1.0, 1.5, 2.0, 4.0, 8.0]]
        assert all(b < a for a, b in zip(times, times[1:]))
        times_p = [usable_time(SpeedupGeometry(1.0, p, 0.25, speedup=2.0))
                   for p in [0.05, 0.1, 0.2, 0.4]]
        assert all(b < a for a, b in zip(times_p, times_p[1:]))

    def test_identity_exact(self):
        for duration, prefix, tail in [(1.0, 0.1, 0.25), (2.0, 0.3, 0.5), (0.8, 0.05, 0.1)]:
            geom = SpeedupGeometry(duration, prefix, tail)
            assert max_speedup(geom) * prefix == pytest.approx(duration - tail, rel=1e-12)


class TestStallSimulation:
    GEOMETRIES = [
        (1.0, 0.10, 0.25, 20),
        (1.0, 0.12, 0.26, 20),
        (0.8, 0.20, 0.20, 16),
        (2.0, 0.30, 0.50, 40),
        (1.5, 0.08, 0.30, 30),
    ]

    def test_boundary_matches_formula_within_quantization(self):
        for duration, prefix, tail, n in self.GEOMETRIES:
            geom = SpeedupGeometry(duration, prefix, tail)
            bound = max_speedup(geom)
            stall_at = find_stall_speedup(geom, n_waypoints=n)
            demo_dt = duration / (n - 1)
            quantization = demo_dt / prefix  # one waypoint of slack in speed units
            assert abs(stall_at - bound) <= quantization + 0.05, (
                f"geometry {duration, prefix, tail}: stall {stall_at} vs bound {bound}"
            )

    def test_above_bound_stalls_below_does_not(self):
        geom = SpeedupGeometry(1.0, 0.1, 0.25)
        bound = max_speedup(geom)  # 7.5
        assert simulate_chunk_supply(SpeedupGeometry(1.0, 0.1, 0.25, bound * 1.2), 20)
        assert not simulate_chunk_supply(SpeedupGeometry(1.0, 0.1, 0.25, bound * 0.7), 20)


def make_tick_records(t, q, scale):
    return [
        {"record": "tick", "t": float(ti), "q": list(map(float, qi)), "scale": float(si)}
        for ti, qi, si in zip(t, q, scale)
    ]


class TestClassifySegments:
    GEOM = SpeedupGeometry(1.0, 0.12, 0.26)

    def test_stationary_unbounded(self):
        t = np.arange(0, 2, 0.01)
        q = np.zeros((t.size, 2))
        scale = np.full(t.size, 3.0)
        labels = classify_segments(
            make_tick_records(t, q, scale), np.array([3.5, 3.5]),
            np.array([60.0, 60.0]), np.array([8000.0, 8000.0]), self.GEOM,
        )
        assert labels and all(l.label == "unbounded" for l in labels)

    def test_velocity_sweep_motion_bounded(self):
        t = np.arange(0, 2, 0.01)
        q = np.stack([3.4 * t, np.zeros_like(t)], axis=1)  # 3.4 rad/s vs 3.5 limit
        scale = np.full(t.size, 3.0)
        labels = classify_segments(
            make_tick_records(t, q, scale), np.array([3.5, 3.5]),
            np.array([1e6, 1e6]), np.array([1e9, 1e9]), self.GEOM,
        )
        assert all(l.label == "motion_bounded" for l in labels)
        assert all(l.binding_quantity == "velocity" for l in labels)

    def test_slow_scale_control_bounded(self):
        t = np.arange(0, 2, 0.01)
        q = np.stack([0.1 * np.sin(t), np.zeros_like(t)], axis=1)
        scale = np.full(t.size, 1.0)  # far below cap and geometry bound
        labels = classify_segments(
            make_tick_records(t, q, scale), np.array([3.5, 3.5]),
            np.array([60.0, 60.0]), np.array([8000.0, 8000.0]), self.GEOM,
        )
        assert all(l.label == "control_bounded" for l in labels)

    def test_partition_no_gaps(self):
        t = np.arange(0, 3.3, 0.01)
        q = np.stack([np.sin(t), np.cos(t)], axis=1)
        scale = np.full(t.size, 2.0)
        labels = classify_segments(
            make_tick_records(t, q, scale), np.array([3.5, 3.5]),
            np.array([60.0, 60.0]), np.array([8000.0, 8000.0]), self.GEOM,
        )
        assert labels[0].start == t[0]
        for a, b in zip(labels, labels[1:]):
            assert b.start == pytest.approx(a.end, abs=1e-12)
        assert labels[-1].end == pytest.approx(t[-1])

    def test_missing_limits_error(self):
        with pytest.raises(ValueError):
            classify_segments(make_tick_records([0, 0.01], [[0], [0]], [1, 1]),
                              None, None, None, self.GEOM)


class TestLearnedSpeedSegmentation:
    def test_episode_mostly_motion_or_control_bounded(self):
        # an episode at learned-shape speeds (slow near windows, cap
        # elsewhere) should spend most of its time at one of the two
        # bounds; leftover unbounded time is transition cost
        import numpy as np

        from chunkdrive.core import TimingCalibration
        from chunkdrive.pipeline import PolicyStubConfig, path_speed, run_episode
        from chunkdrive.plant_sim import PlantConfig, make_default_task
        from chunkdrive.spatial_opt import SpatialParams
        from chunkdrive.speed_adapt import (
            StepContext,
            ThrottleSample,
            extract_features,
            train_regressor,
        )
        from chunkdrive.temporal_opt import TemporalParams as TP

        task = make_default_task(n_joints=7)
        stub = PolicyStubConfig()
        rng = np.random.default_rng(0)
        samples = []
        for i in range(400):
            p = rng.random()
            ctx = StepContext(
                task=task, progress=p, position=task.sample_fraction(p),
                tracking_error=0.0,
                mean_joint_speed=path_speed(task, p, stub.demo_dt),
            )
            f = extract_features(ctx)
            slow = f[5] > 0.5 or f[6] > 0.5 or f[8] > 0.5
            target = 1.25 if slow else (2.2 if f[7] > 0.5 else 3.0)
            samples.append(ThrottleSample(
                features=f, operator_scale=target + rng.normal(scale=0.02),
                episode_id=0, step_time=i * 0.01,
            ))
        model = train_regressor(samples, ridge=1e-4)
        plant_cfg = PlantConfig(n_joints=7)
        calib = TimingCalibration(0.033, 0.055, 0.050, 0.140, 0.15)
        res = run_episode(task, plant_cfg, stub, TP(), SpatialParams(), calib,
                          speed_model=model, seed=4242, episode_id=4242)
        assert res.outcome == "success"
        geom = SpeedupGeometry(
            chunk_duration=stub.chunk_period,
            prefix_overhead=stub.inference_latency + 0.02,
            unreliable_tail=stub.tail_count * stub.demo_dt,
        )
        labels = classify_segments(
            res.log.records, plant_cfg.v_max_hw, plant_cfg.a_max_hw,
            plant_cfg.jerk_max_hw, geom, s_cap=3.0,
        )
        total = sum(l.end - l.start for l in labels)
        spans = {}
        for l in labels:
            spans[l.label] = spans.get(l.label, 0.0) + (l.end - l.start)
        bounded = spans.get("motion_bounded", 0.0) + spans.get("control_bounded", 0.0)
        assert bounded / total >= 0.70, spans
        assert spans.get("motion_bounded", 0.0) > 0.0
        assert spans.get("control_bounded", 0.0) > 0.0


class TestFailureHistogram:
    def test_empty(self):
        out = failure_histogram({1.0: []})
        assert out[1.0]["total"] == 0
        assert out[1.0]["normalized"] == []

    def test_mass_conservation_and_counts(self):
        rng = np.random.default_rng(0)
        entries = [(float(p), p > 0.5) for p in rng.random(137)]
        out = failure_histogram({3.0: entries}, bins=10)
        assert out[3.0]["total"] == 137
        assert sum(out[3.0]["counts"]) == 137
        assert sum(out[3.0]["normalized"]) == pytest.approx(1.0)

    def test_bin_refinement_invariance(self):
        rng = np.random.default_rng(1)
        entries = [float(p) for p in rng.random(64)]
        coarse = failure_histogram({2.0: entries}, bins=8)
        fine = failure_histogram({2.0: entries}, bins=64)
        assert coarse[2.0]["total"] == fine[2.0]["total"]

    def test_window_mass(self):
        entries = [(0.32, True), (0.33, True), (0.64, True), (0.1, False)]
        out = failure_histogram({3.0: entries})
        assert out[3.0]["window_mass"] == pytest.approx(0.75)


class TestProfileReport:
    def jerky_chunk(self):
        rng = np.random.default_rng(3)
        t = np.linspace(0, 1, 24)
        base = 0.8 * np.sin(2.0 * t)
        base[[6, 13, 19]] += [0.12, -0.15, 0.1]
        return Chunk(waypoints=base[:, None], durations=np.full(23, 0.05))

    def test_identical_streams_identical_stats(self):
        chunk = self.jerky_chunk()
        report = profile_report([chunk], [chunk])
        assert report["before"] == report["after"]

    def test_stationary_zero_stats(self):
        chunk = Chunk(waypoints=np.zeros((6, 2)), durations=np.full(5, 0.1))
        report = profile_report([chunk], [chunk])
        for key, value in report["before"].items():
            assert value == 0.0

    def test_retimed_stream_flatter_than_squeezed(self, tmp_path):
        chunk = self.jerky_chunk()
        params = TemporalParams(lambda0=1.0, lambda1=25.0, dt_min=0.005, dt_max=0.5, v_max=10.0)
        retimed = retime_chunk(chunk, np.full(23, 3.0), params).chunk
        squeezed = chunk.with_durations(np.full(23, retimed.total_duration / 23))
        csv = tmp_path / "profiles.csv"
        summary = tmp_path / "profiles.json"
        report = profile_report([squeezed], [retimed], out_csv=csv, out_json=summary)
        assert report["after"]["peak_acceleration"] < report["before"]["peak_acceleration"]
        assert report["after"]["peak_jerk"] < report["before"]["peak_jerk"]
        assert csv.exists() and summary.exists()
        header = csv.read_text().splitlines()[0]
        assert header == "t,v,a,j,variant"
