"""JSON config: one immutable snapshot drives every command.

Schema validation is explicit and strict: unknown keys are rejected with
their full path, so a typo cannot silently fall back to a default. The
``--set section.key=value`` override mechanism reuses the same validation.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field


from .calibration import RigConfig
from .pipeline import PolicyStubConfig
from .plant_sim import PlantConfig, PrecisionWindow, TaskScript, make_default_task
from .spatial_opt import SpatialParams
from .temporal_opt import TemporalParams

__all__ = ["Config", "ConfigError", "load_config", "default_config_dict"]


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending key path."""


@dataclass
class SpeedConfig:
    s_min: float = 0.5
    s_cap: float = 3.0
    max_rel: float = 2.0
    p_tol: float = 0.1
    ridge: float = 1e-4
    round_decay: float = 0.4
    discard_window: float = 0.4

    def __post_init__(self) -> None:
        if not (0 < self.s_min <= self.s_cap):
            raise ConfigError("speed: need 0 < s_min <= s_cap")
        if self.max_rel <= 1.0:
            raise ConfigError("speed.max_rel must exceed 1")


@dataclass
class OperatorConfig:
    target_in: float = 1.25
    target_out: float = 3.0
    anticipation: float = 0.08
    hold_after: float = 0.04


@dataclass
class RatesConfig:
    feedback_every: int = 2
    switch_margin_ticks: int = 2


@dataclass
class Config:
    seed: int = 0
    plant: PlantConfig = None
    task: TaskScript = None
    temporal: TemporalParams = None
    spatial: SpatialParams = None
    speed: SpeedConfig = None
    pipeline: PolicyStubConfig = None
    rig: RigConfig = None
    operator: OperatorConfig = None
    rates: RatesConfig = None
    snapshot: dict = field(default_factory=dict)


def default_config_dict() -> dict:
    return {
        "seed": 0,
        "plant": {
            "tau": 0.15,
            "t_camera": 0.055,
            "t_readout": 0.033,
            "t_proprio": 0.050,
            "n_joints": 7,
            "q_min": -2.8,
            "q_max": 2.8,
            "v_max_hw": 2.6,
            "a_max_hw": 65.0,
            "jerk_max_hw": 2600.0,
            "proprio_noise_std": 1e-4,
        },
        "task": {
            "kind": "default",
            "n_joints": 7,
            "total_duration_1x": 8.0,
            "seed": 7,
            "failure_beta": 0.5,
            "windows": [
                {"start": 0.30, "end": 0.345, "tolerance": 0.015, "speed_sensitivity": 4.0},
                {"start": 0.62, "end": 0.665, "tolerance": 0.015, "speed_sensitivity": 4.0},
            ],
        },
        "temporal": {
            "lambda0": 1.0,
            "lambda1": 25.0,
            "dt_min": 0.005,
            "dt_max": 0.5,
            "v_max": 3.5,
        },
        "spatial": {
            "N": 20,
            "h": 0.01,
            "lambda_cmd": 0.005,
            "lambda_lag": 0.005,
            "lambda_d1": 0.02,
            "lambda_d2": 0.01,
            "lambda_f": 1.0,
            "q_min": -2.8,
            "q_max": 2.8,
            "d_max": 0.35,
            "v_max_cmd": 6.0,
            "a_max_cmd": 250.0,
        },
        "speed": {
            "s_min": 0.5,
            "s_cap": 3.0,
            "max_rel": 2.0,
            "p_tol": 0.1,
            "ridge": 1e-4,
            "round_decay": 0.4,
            "discard_window": 0.4,
        },
        "pipeline": {
            "H": 20,
            "chunk_period": 1.0,
            "inference_latency": 0.1,
            "tail_fraction": 0.25,
            "tail_noise_std": 0.01,
        },
        "rig": {
            "sway_freq": 0.5,
            "sway_amplitude": 0.3,
            "fps": 120.0,
            "duration": 24.0,
            "warmup": 2.0,
            "width": 256,
            "screen_delay": 0.02,
            "pixel_noise_std": 0.0,
            "sway_joint": 0,
            "sim_rate": 480.0,
        },
        "operator": {
            "target_in": 1.25,
            "target_out": 3.0,
            "anticipation": 0.08,
            "hold_after": 0.04,
        },
        "rates": {"feedback_every": 2, "switch_margin_ticks": 2},
    }


_SECTION_KEYS = {
    "plant": {"tau", "t_camera", "t_readout", "t_proprio", "n_joints", "q_min",
              "q_max", "v_max_hw", "a_max_hw", "jerk_max_hw", "proprio_noise_std"},
    "task": {"kind", "n_joints", "total_duration_1x", "seed", "failure_beta", "windows"},
    "temporal": {"lambda0", "lambda1", "dt_min", "dt_max", "v_max"},
    "spatial": {"N", "h", "lambda_cmd", "lambda_lag", "lambda_d1", "lambda_d2",
                "lambda_f", "q_min", "q_max", "d_max", "v_max_cmd", "a_max_cmd"},
    "speed": {"s_min", "s_cap", "max_rel", "p_tol", "ridge", "round_decay", "discard_window"},
    "pipeline": {"H", "chunk_period", "inference_latency", "tail_fraction", "tail_noise_std"},
    "rig": {"sway_freq", "sway_amplitude", "fps", "duration", "warmup", "width",
            "screen_delay", "pixel_noise_std", "sway_joint", "sim_rate"},
    "operator": {"target_in", "target_out", "anticipation", "hold_after"},
    "rates": {"feedback_every", "switch_margin_ticks"},
}

_WINDOW_KEYS = {"start", "end", "tolerance", "speed_sensitivity"}


def _check_keys(data: dict, allowed: set, path: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key '{path}.{key}'")


def apply_overrides(data: dict, overrides: list) -> dict:
    """Apply --set section.key=value pairs onto a config dict."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"override path '{path}' does not exist")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"override path '{path}' does not exist")
        node[keys[-1]] = value
    return data


def merge_with_defaults(data: dict) -> dict:
    """Overlay a user config dict onto the defaults, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(data, set(_SECTION_KEYS) | {"seed"}, "config")
    merged = default_config_dict()
    for section, content in data.items():
        if section == "seed":
            merged["seed"] = content
            continue
        if not isinstance(content, dict):
            raise ConfigError(f"section '{section}' must be an object")
        _check_keys(content, _SECTION_KEYS[section], section)
        merged[section].update(content)
    return merged


def parse_config(data: dict) -> Config:
    merged = merge_with_defaults(data)
    try:
        seed = int(merged["seed"])
        plant = PlantConfig(**merged["plant"], rng_seed=seed)
        task_cfg = merged["task"]
        if task_cfg.get("kind", "default") != "default":
            raise ConfigError("task.kind: only 'default' is available")
        windows = []
        for i, w in enumerate(task_cfg["windows"]):
            _check_keys(w, _WINDOW_KEYS, f"task.windows[{i}]")
            windows.append(PrecisionWindow(
                start=float(w["start"]), end=float(w["end"]),
                tolerance=float(w["tolerance"]),
                speed_sensitivity=float(w["speed_sensitivity"]),
            ))
        task = make_default_task(
            n_joints=int(task_cfg["n_joints"]),
            total_duration_1x=float(task_cfg["total_duration_1x"]),
            seed=int(task_cfg["seed"]),
            windows=windows,
            failure_beta=float(task_cfg["failure_beta"]),
        )
        temporal = TemporalParams(**merged["temporal"])
        spatial = SpatialParams(**merged["spatial"])
        speed = SpeedConfig(**merged["speed"])
        stub = PolicyStubConfig(**merged["pipeline"])
        rig = RigConfig(**merged["rig"])
        operator = OperatorConfig(**merged["operator"])
        rates = RatesConfig(**merged["rates"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return Config(
        seed=seed, plant=plant, task=task, temporal=temporal, spatial=spatial,
        speed=speed, pipeline=stub, rig=rig, operator=operator, rates=rates,
        snapshot=merged,
    )


def load_config(path=None, overrides: list | None = None) -> Config:
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    merged = merge_with_defaults(data)
    if overrides:
        merged = apply_overrides(merged, overrides)
    return parse_config(merged)
