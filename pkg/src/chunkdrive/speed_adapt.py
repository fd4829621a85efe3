"""Learning the per-step execution speed from experience.

Two model families behind one prediction interface:

- A ridge regressor trained on human (or scripted) throttle data: during
  rollouts the operator nudges execution speed up or down; every step's
  executed scale becomes a regression target for the step's context
  features. Collection is iterative: each round's model raises the base
  speed the operator starts from, and rounds accumulate, the regressor
  averaging outcomes across them. Labels near a failure are discarded.

- A failure-probability model (logistic in features plus speed and
  speed^2) trained from rollout outcomes only; speed selection picks the
  largest candidate whose predicted failure probability stays tolerable.

Features are task-state summaries (progress, window proximity, tracking
error, recent speed) rather than images; the interface is a flat vector so
a richer encoder could replace the extractor without touching training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .plant_sim import TaskScript

__all__ = [
    "FEATURE_NAMES",
    "StepContext",
    "ThrottleSample",
    "SpeedModel",
    "extract_features",
    "train_regressor",
    "predict_scale",
    "apply_throttle",
    "discard_failure_region",
    "train_failure_model",
    "predict_failure_probability",
    "select_speed_from_q",
]

FEATURE_NAMES = (
    "progress",
    "window_distance",
    "gripper",
    "tracking_error",
    "mean_speed",
    "in_window",
    "window_ahead_soon",
    "window_ahead",
    "window_behind",
)

# Signed proximity bins (progress fraction). Binary bin features give the
# linear regressor a piecewise-constant basis around windows, so the learned
# slow-down can switch sharply instead of ramping over the whole approach.
AHEAD_SOON_MARGIN = 0.05
AHEAD_MARGIN = 0.10
BEHIND_MARGIN = 0.04
DISTANCE_CAP = 0.12


@dataclass
class StepContext:
    """Rollout state snapshot from which speed features are derived."""

    task: TaskScript
    progress: float
    position: np.ndarray
    tracking_error: float
    mean_joint_speed: float


def extract_features(ctx: StepContext) -> np.ndarray:
    """Deterministic feature map for one step (see FEATURE_NAMES)."""
    if not (0.0 <= ctx.progress <= 1.0):
        raise ValueError("progress out of range")
    if ctx.position is None or ctx.tracking_error is None:
        raise ValueError("incomplete step context")
    task = ctx.task
    p = ctx.progress
    in_window = 1.0 if task.window_at(p) is not None else 0.0
    ahead_soon = 0.0
    ahead = 0.0
    behind = 0.0
    dist_next = DISTANCE_CAP  # forward distance to the next window start
    for w in task.precision_windows:
        gap_to_start = w.start - p
        if 0.0 < gap_to_start <= AHEAD_SOON_MARGIN:
            ahead_soon = 1.0
        elif AHEAD_SOON_MARGIN < gap_to_start <= AHEAD_MARGIN:
            ahead = 1.0
        if gap_to_start > 0.0:
            dist_next = min(dist_next, gap_to_start)
        gap_past_end = p - w.end
        if 0.0 < gap_past_end <= BEHIND_MARGIN:
            behind = 1.0
    if in_window:
        dist_next = 0.0
    gripper = float(ctx.position[-1]) if ctx.position.shape[0] > 1 else 0.0
    return np.array(
        [
            p,
            dist_next,
            gripper,
            ctx.tracking_error,
            ctx.mean_joint_speed,
            in_window,
            ahead_soon,
            ahead,
            behind,
        ]
    )


@dataclass
class ThrottleSample:
    features: np.ndarray
    operator_scale: float
    episode_id: int
    step_time: float
    round_index: int = 0
    discarded: bool = False

    def to_dict(self) -> dict:
        return {
            "features": [float(v) for v in self.features],
            "operator_scale": self.operator_scale,
            "episode_id": self.episode_id,
            "step_time": self.step_time,
            "round_index": self.round_index,
            "discarded": self.discarded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThrottleSample":
        return cls(
            features=np.asarray(d["features"], dtype=float),
            operator_scale=float(d["operator_scale"]),
            episode_id=int(d["episode_id"]),
            step_time=float(d["step_time"]),
            round_index=int(d.get("round_index", 0)),
            discarded=bool(d.get("discarded", False)),
        )


@dataclass
class SpeedModel:
    """Trained speed predictor (regressor) or failure model (qmodel)."""

    kind: str  # "regressor" | "qmodel"
    weights: np.ndarray  # regressor: (F,); qmodel: (F+2,) for speed, speed^2
    intercept: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    s_min: float = 0.5
    s_cap: float = 3.0
    training_loss: float = math.nan
    schema_version: int = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "weights": [float(v) for v in self.weights],
            "intercept": self.intercept,
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_std": [float(v) for v in self.feature_std],
            "s_min": self.s_min,
            "s_cap": self.s_cap,
            "training_loss": self.training_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeedModel":
        if d.get("schema_version") != 1:
            raise ValueError(f"unknown speed model schema: {d.get('schema_version')}")
        return cls(
            kind=d["kind"],
            weights=np.asarray(d["weights"], dtype=float),
            intercept=float(d["intercept"]),
            feature_mean=np.asarray(d["feature_mean"], dtype=float),
            feature_std=np.asarray(d["feature_std"], dtype=float),
            s_min=float(d["s_min"]),
            s_cap=float(d["s_cap"]),
            training_loss=float(d.get("training_loss", math.nan)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "SpeedModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / std


def train_regressor(
    samples: list,
    ridge: float = 1e-3,
    s_min: float = 0.5,
    s_cap: float = 3.0,
    round_decay: float = 1.0,
) -> SpeedModel:
    """Ridge regression of operator speed scale on normalized features.

    Discarded samples are excluded. Features and target are centered, so
    the intercept is unpenalized; with ridge = 0 a rank-deficient design
    raises instead of silently pseudo-inverting. ``round_decay`` < 1 weighs
    each collection round by decay^(age): older rounds still average in,
    newer rounds (collected at a higher base speed) dominate.
    """
    kept = [s for s in samples if not s.discarded]
    if not kept:
        raise ValueError("no usable samples")
    x = np.stack([s.features for s in kept])
    t = np.array([s.operator_scale for s in kept])
    n, f = x.shape
    if n < 10 * f:
        raise ValueError(f"need at least {10 * f} samples for {f} features, got {n}")
    if not (0.0 < round_decay <= 1.0):
        raise ValueError("round_decay must lie in (0, 1]")
    newest = max(s.round_index for s in kept)
    weights = np.array([round_decay ** (newest - s.round_index) for s in kept])
    mean = np.average(x, axis=0, weights=weights)
    std = np.sqrt(np.average((x - mean) ** 2, axis=0, weights=weights))
    std = np.where(std < 1e-12, 1.0, std)
    xn = _normalize(x, mean, std)
    t_mean = float(np.average(t, weights=weights))
    tc = t - t_mean
    xw = xn * weights[:, None]
    gram = xw.T @ xn + ridge * np.eye(f)
    if ridge == 0.0 and np.linalg.matrix_rank(xn.T @ xn) < f:
        raise ValueError("rank-deficient design with ridge = 0")
    w = np.linalg.solve(gram, xw.T @ tc)
    pred = xn @ w + t_mean
    loss = float(np.average((pred - t) ** 2, weights=weights))
    return SpeedModel(
        kind="regressor",
        weights=w,
        intercept=t_mean,
        feature_mean=mean,
        feature_std=std,
        s_min=s_min,
        s_cap=s_cap,
        training_loss=loss,
    )


def predict_scale(model: SpeedModel, features: np.ndarray) -> float:
    """Clamped speed-scale prediction for one feature vector."""
    if model.kind != "regressor":
        raise ValueError("predict_scale needs a regressor model")
    xn = _normalize(np.asarray(features, dtype=float), model.feature_mean, model.feature_std)
    raw = float(xn @ model.weights + model.intercept)
    return float(np.clip(raw, model.s_min, model.s_cap))


def apply_throttle(
    model_scale: float,
    operator_input: float,
    max_rel: float,
    s_min: float = 0.5,
    s_cap: float = 3.0,
) -> float:
    """Operator throttle around the model's prediction.

    The input in [-1, 1] scales the speed by at most max_rel in either
    direction relative to the model; zero input leaves it unchanged.
    """
    if max_rel <= 1.0:
        raise ValueError("max_rel must exceed 1")
    operator_input = float(np.clip(operator_input, -1.0, 1.0))
    return float(np.clip(model_scale * max_rel**operator_input, s_min, s_cap))


def discard_failure_region(
    samples: list, failure_time: float, window: float
) -> list:
    """Flag samples within `window` seconds of a failure as discarded."""
    if window < 0:
        raise ValueError("window must be non-negative")
    for s in samples:
        if abs(s.step_time - failure_time) <= window:
            s.discarded = True
    return samples


# -- failure-probability (Q) model -------------------------------------------


def _q_design(features: np.ndarray, speeds: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [features, speeds[:, None], (speeds**2)[:, None]], axis=1
    )


def train_failure_model(
    features: np.ndarray,
    speeds: np.ndarray,
    failed: np.ndarray,
    ridge: float = 1e-3,
    max_iter: int = 200,
    s_min: float = 0.5,
    s_cap: float = 3.0,
) -> tuple[SpeedModel, dict]:
    """Logistic failure-probability model over (features, speed, speed^2).

    Fit by iteratively reweighted least squares. Returns the model plus a
    report holding a calibration curve (predicted-probability bins vs
    empirical failure rates) and a speed-monotonicity check over the
    observed speed range.
    """
    features = np.asarray(features, dtype=float)
    speeds = np.asarray(speeds, dtype=float)
    failed = np.asarray(failed, dtype=float)
    if set(np.unique(failed)) - {0.0, 1.0}:
        raise ValueError("labels must be binary")
    if np.unique(failed).size < 2:
        raise ValueError("single-class data")
    if np.unique(np.round(speeds, 9)).size < 2:
        raise ValueError("need at least 2 distinct speed levels")

    x = _q_design(features, speeds)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xn = _normalize(x, mean, std)
    n, f = xn.shape
    w = np.zeros(f)
    b = float(np.log((failed.mean() + 1e-6) / (1 - failed.mean() + 1e-6)))
    for _ in range(max_iter):
        z = xn @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        grad_w = xn.T @ (p - failed) / n + ridge * w
        grad_b = float(np.mean(p - failed))
        s = np.maximum(p * (1 - p), 1e-6)
        hess = (xn * s[:, None]).T @ xn / n + ridge * np.eye(f)
        step_w = np.linalg.solve(hess, grad_w)
        step_b = grad_b / max(float(np.mean(s)), 1e-9)
        w -= step_w
        b -= step_b
        if max(float(np.max(np.abs(step_w))), abs(step_b)) < 1e-10:
            break

    model = SpeedModel(
        kind="qmodel",
        weights=w,
        intercept=b,
        feature_mean=mean,
        feature_std=std,
        s_min=s_min,
        s_cap=s_cap,
        training_loss=float(
            -np.mean(
                failed * np.log(np.clip(1 / (1 + np.exp(-(xn @ w + b))), 1e-12, 1))
                + (1 - failed)
                * np.log(np.clip(1 - 1 / (1 + np.exp(-(xn @ w + b))), 1e-12, 1))
            )
        ),
    )

    p_hat = np.array([
        predict_failure_probability(model, features[i], speeds[i]) for i in range(n)
    ])
    bins = np.linspace(0, 1, 6)
    calibration = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        mask = (p_hat >= lo) & (p_hat < hi)
        if np.any(mask):
            calibration.append(
                {"bin": (float(lo), float(hi)),
                 "predicted": float(p_hat[mask].mean()),
                 "empirical": float(failed[mask].mean()),
                 "count": int(mask.sum())}
            )
    # monotone in speed over the observed support: d(logit)/ds >= 0 there
    w_s = w[-2] / std[-2]
    w_s2 = w[-1] / std[-1]
    lo_s, hi_s = float(speeds.min()), float(speeds.max())
    slope_lo = w_s + 2 * w_s2 * lo_s
    slope_hi = w_s + 2 * w_s2 * hi_s
    monotone = bool(min(slope_lo, slope_hi) >= -1e-9)
    report = {"calibration": calibration, "speed_monotone_on_support": monotone}
    return model, report


def predict_failure_probability(
    model: SpeedModel, features: np.ndarray, speed: float
) -> float:
    if model.kind != "qmodel":
        raise ValueError("needs a qmodel")
    x = _q_design(np.asarray(features, dtype=float)[None, :], np.array([speed]))[0]
    xn = _normalize(x, model.feature_mean, model.feature_std)
    z = float(xn @ model.weights + model.intercept)
    return 1.0 / (1.0 + math.exp(-z))


def select_speed_from_q(
    model: SpeedModel, features: np.ndarray, candidates: list, p_tol: float
) -> float:
    """Largest candidate speed with tolerable predicted failure probability.

    Candidates must be sorted ascending; when every candidate exceeds the
    tolerance the slowest one is returned.
    """
    if any(b < a for a, b in zip(candidates, candidates[1:])):
        raise ValueError("candidates must be sorted ascending")
    best = candidates[0]
    for c in candidates:
        if predict_failure_probability(model, features, c) <= p_tol:
            best = c
    return float(best)
