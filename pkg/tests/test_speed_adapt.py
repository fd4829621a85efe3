import math

import numpy as np
import pytest

from chunkdrive.plant_sim import make_default_task
from chunkdrive.speed_adapt import (
    FEATURE_NAMES,
    SpeedModel,
    StepContext,
    ThrottleSample,
    apply_throttle,
    discard_failure_region,
    extract_features,
    predict_failure_probability,
    predict_scale,
    select_speed_from_q,
    train_failure_model,
    train_regressor,
)

TASK = make_default_task(n_joints=3, total_duration_1x=4.0)


def ctx(progress=0.0, err=0.0, speed=0.0):
    return StepContext(
        task=TASK,
        progress=progress,
        position=TASK.sample_fraction(progress),
        tracking_error=err,
        mean_joint_speed=speed,
    )


def make_samples(rng, n, feature_fn, target_fn):
    samples = []
    for i in range(n):
        f = feature_fn(i, rng)
        samples.append(
            ThrottleSample(
                features=f,
                operator_scale=target_fn(f, rng),
                episode_id=i // 50,
                step_time=(i % 50) * 0.1,
            )
        )
    return samples


class TestExtractFeatures:
    def test_start_of_episode(self):
        f = extract_features(ctx(progress=0.0))
        assert f[FEATURE_NAMES.index("progress")] == 0.0

    def test_window_start_flag(self):
        w = TASK.precision_windows[0]
        f = extract_features(ctx(progress=w.start))
        assert f[FEATURE_NAMES.index("in_window")] == 1.0
        assert f[FEATURE_NAMES.index("window_distance")] == 0.0

    def test_proximity_bins(self):
        w = TASK.precision_windows[0]
        f = extract_features(ctx(progress=w.start - 0.03))
        assert f[FEATURE_NAMES.index("in_window")] == 0.0
        assert f[FEATURE_NAMES.index("window_ahead_soon")] == 1.0
        f = extract_features(ctx(progress=w.start - 0.08))
        assert f[FEATURE_NAMES.index("window_ahead")] == 1.0
        assert f[FEATURE_NAMES.index("window_ahead_soon")] == 0.0
        f = extract_features(ctx(progress=w.end + 0.02))
        assert f[FEATURE_NAMES.index("window_behind")] == 1.0
        # forward distance: measured to the next window start, capped
        f = extract_features(ctx(progress=w.start - 0.02))
        assert f[FEATURE_NAMES.index("window_distance")] == pytest.approx(0.02)
        f = extract_features(ctx(progress=0.99))
        assert f[FEATURE_NAMES.index("window_distance")] == pytest.approx(0.12)

    def test_incomplete_context_rejected(self):
        bad = ctx()
        bad.position = None
        with pytest.raises(ValueError):
            extract_features(bad)

    def test_deterministic(self):
        a = extract_features(ctx(progress=0.4, err=0.01, speed=1.2))
        b = extract_features(ctx(progress=0.4, err=0.01, speed=1.2))
        np.testing.assert_array_equal(a, b)


class TestTrainRegressor:
    def test_constant_target_intercept_only(self):
        rng = np.random.default_rng(0)
        samples = make_samples(
            rng, 100, lambda i, r: r.normal(size=7), lambda f, r: 2.0
        )
        model = train_regressor(samples, ridge=1e-6)
        for s in samples[:10]:
            assert predict_scale(model, s.features) == pytest.approx(2.0, abs=1e-9)

    def test_duplicate_sets_average(self):
        rng = np.random.default_rng(1)
        base = [rng.normal(size=7) for _ in range(80)]
        s1 = [
            ThrottleSample(features=f, operator_scale=1.0, episode_id=0, step_time=i * 0.1)
            for i, f in enumerate(base)
        ]
        s2 = [
            ThrottleSample(features=f, operator_scale=3.0, episode_id=1, step_time=i * 0.1)
            for i, f in enumerate(base)
        ]
        model = train_regressor(s1 + s2, ridge=1e-9)
        for f in base[:10]:
            assert predict_scale(model, f) == pytest.approx(2.0, abs=1e-6)

    def test_recovers_linear_ground_truth(self):
        # scale = 3 - 2 * near_window + noise
        errs = []
        for seed in range(50):
            rng = np.random.default_rng(seed)

            def feat(i, r):
                f = np.zeros(7)
                f[0] = r.uniform(0, 1)
                f[6] = float(r.random() < 0.3)
                f[4] = r.uniform(0, 2)
                return f

            def target(f, r):
                return 3.0 - 2.0 * f[6] + r.normal(scale=0.05)

            samples = make_samples(rng, 400, feat, target)
            model = train_regressor(samples, ridge=1e-6, s_cap=4.0)
            coef_near = model.weights[6] / model.feature_std[6]
            errs.append(abs(coef_near - (-2.0)) / 2.0)
        assert np.mean(errs) < 0.05

    def test_discarded_excluded(self):
        rng = np.random.default_rng(2)
        good = make_samples(rng, 120, lambda i, r: r.normal(size=7), lambda f, r: 1.5)
        bad = make_samples(rng, 50, lambda i, r: r.normal(size=7), lambda f, r: 99.0)
        for s in bad:
            s.discarded = True
        model = train_regressor(good + bad, ridge=1e-6, s_cap=5.0)
        assert predict_scale(model, good[0].features) == pytest.approx(1.5, abs=1e-6)

    def test_too_few_samples(self):
        rng = np.random.default_rng(3)
        samples = make_samples(rng, 30, lambda i, r: r.normal(size=7), lambda f, r: 1.0)
        with pytest.raises(ValueError):
            train_regressor(samples)

    def test_model_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        samples = make_samples(rng, 120, lambda i, r: r.normal(size=7), lambda f, r: 2.2)
        model = train_regressor(samples)
        path = tmp_path / "model.json"
        model.save(path)
        back = SpeedModel.load(path)
        np.testing.assert_array_equal(back.weights, model.weights)
        assert back.kind == "regressor"
        f = rng.normal(size=7)
        assert predict_scale(back, f) == predict_scale(model, f)


class TestPredictScale:
    def model(self, **kw):
        rng = np.random.default_rng(5)
        samples = make_samples(rng, 120, lambda i, r: r.normal(size=7), lambda f, r: 4.2)
        return train_regressor(samples, **kw)

    def test_cap(self):
        model = self.model(s_cap=3.0)
        assert predict_scale(model, np.zeros(7)) == 3.0

    def test_interior(self):
        rng = np.random.default_rng(6)
        samples = make_samples(rng, 120, lambda i, r: r.normal(size=7), lambda f, r: 1.0)
        model = train_regressor(samples)
        assert predict_scale(model, np.zeros(7)) == pytest.approx(1.0, abs=1e-6)

    def test_always_within_bounds(self):
        model = self.model(s_cap=3.0)
        rng = np.random.default_rng(7)
        for _ in range(100):
            s = predict_scale(model, rng.normal(scale=10, size=7))
            assert 0.5 <= s <= 3.0


class TestApplyThrottle:
    def test_identity_at_zero(self):
        assert apply_throttle(1.7, 0.0, 1.5) == pytest.approx(1.7)

    def test_formula(self):
        assert apply_throttle(1.5, 1.0, 1.5) == pytest.approx(2.25)

    def test_cap_binds(self):
        assert apply_throttle(2.5, 1.0, 1.5, s_cap=3.0) == 3.0

    def test_slowdown(self):
        assert apply_throttle(2.0, -1.0, 2.0) == pytest.approx(1.0)

    def test_max_rel_validation(self):
        with pytest.raises(ValueError):
            apply_throttle(1.0, 0.5, 1.0)


class TestDiscardFailureRegion:
    def samples(self):
        return [
            ThrottleSample(features=np.zeros(7), operator_scale=1.0, episode_id=0, step_time=t)
            for t in np.arange(0, 20, 0.5)
        ]

    def test_no_failure_no_discards(self):
        s = self.samples()
        discard_failure_region(s, failure_time=1e9, window=2.0)
        assert not any(x.discarded for x in s)

    def test_zero_window_exact_step(self):
        s = self.samples()
        discard_failure_region(s, failure_time=10.0, window=0.0)
        flagged = [x.step_time for x in s if x.discarded]
        assert flagged == [10.0]

    def test_exact_interval(self):
        s = self.samples()
        discard_failure_region(s, failure_time=10.0, window=2.0)
        flagged = sorted(x.step_time for x in s if x.discarded)
        assert flagged[0] == 8.0 and flagged[-1] == 12.0
        assert len(flagged) == 9

    def test_idempotent_and_untouched_others(self):
        s = self.samples()
        discard_failure_region(s, 10.0, 2.0)
        first = [x.discarded for x in s]
        discard_failure_region(s, 10.0, 2.0)
        assert [x.discarded for x in s] == first


class TestFailureModel:
    def synthetic(self, seed, n=4000, law=lambda s: 1 / (1 + np.exp(-4 * (s - 2)))):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(n, 3))
        speeds = rng.choice([1.0, 1.5, 2.0, 2.5, 3.0], size=n)
        p = law(speeds)
        failed = (rng.random(n) < p).astype(float)
        return feats, speeds, failed

    def test_recovers_synthetic_law(self):
        mids = []
        for seed in range(8):
            feats, speeds, failed = self.synthetic(seed)
            model, report = train_failure_model(feats, speeds, failed)
            mids.append(predict_failure_probability(model, np.zeros(3), 2.0))
            assert report["speed_monotone_on_support"]
        assert 0.45 <= np.mean(mids) <= 0.55

    def test_all_success_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            train_failure_model(rng.normal(size=(100, 3)), rng.choice([1.0, 2.0], 100), np.zeros(100))

    def test_near_zero_probability_when_failures_rare(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(2000, 3))
        speeds = rng.choice([1.0, 2.0], size=2000)
        failed = np.zeros(2000)
        failed[:20] = 1.0  # rare failures
        model, _ = train_failure_model(feats, speeds, failed)
        probs = [
            predict_failure_probability(model, feats[i], speeds[i]) for i in range(200)
        ]
        assert np.mean(probs) <= 0.05

    def test_single_speed_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            train_failure_model(
                rng.normal(size=(100, 3)), np.full(100, 2.0),
                (rng.random(100) < 0.5).astype(float),
            )

    def test_censored_visitation_keeps_monotonicity_on_support(self):
        # high-speed states beyond the first failures never get visited:
        # train only on speeds the censoring allows and check monotonicity
        # there rather than global accuracy
        rng = np.random.default_rng(3)
        feats, speeds, failed = self.synthetic(3)
        visible = speeds <= 2.5
        model, report = train_failure_model(feats[visible], speeds[visible], failed[visible])
        assert report["speed_monotone_on_support"]
        p = [predict_failure_probability(model, np.zeros(3), s) for s in [1.0, 1.5, 2.0, 2.5]]
        assert all(b >= a - 1e-9 for a, b in zip(p, p[1:]))


class TestSelectSpeed:
    def model(self):
        feats, speeds, failed = TestFailureModel().synthetic(11)
        model, _ = train_failure_model(feats, speeds, failed)
        return model

    def test_tolerance_one_takes_max(self):
        model = self.model()
        assert select_speed_from_q(model, np.zeros(3), [1.0, 2.0, 3.0], p_tol=1.0) == 3.0

    def test_tolerance_zero_falls_back_to_min(self):
        model = self.model()
        assert select_speed_from_q(model, np.zeros(3), [1.0, 2.0, 3.0], p_tol=0.0) == 1.0

    def test_synthetic_law_selection(self):
        # p(s) = sigmoid(4 (s - 2)): p(1) ~ 0.018, p(2) = 0.5, p(3) ~ 0.98
        model = self.model()
        assert select_speed_from_q(model, np.zeros(3), [1.0, 2.0, 3.0], p_tol=0.1) == 1.0

    def test_unsorted_rejected(self):
        model = self.model()
        with pytest.raises(ValueError):
            select_speed_from_q(model, np.zeros(3), [2.0, 1.0], p_tol=0.5)
