"""The ``chunkdrive`` command line: calibrate, rollout, train, analyze, serve.

Exit codes: 0 success, 2 usage error, 3 config validation error, 4 runtime
failure. Every command is deterministic under a fixed seed (simulated
clock); ``serve`` runs the paced real-clock loop with the browser console.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import queue
import sys
import threading
from pathlib import Path

import numpy as np

from . import analysis
from .calibration import calibrate_delays, calibration_report, record_sway
from .config import Config, ConfigError, load_config
from .core import TimingCalibration
from .pipeline import (
    RolloutLog,
    ScriptedOperator,
    path_speed,
    run_episode,
    samples_from_log,
)
from .speed_adapt import (
    SpeedModel,
    StepContext,
    extract_features,
    train_failure_model,
    train_regressor,
)
from .wire import EventMsg, ThrottleMsg, decode_message, message_to_dict

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

log = logging.getLogger("chunkdrive")


def _episode_kwargs(cfg: Config, **extra) -> dict:
    kwargs = dict(
        task=cfg.task,
        plant_config=cfg.plant,
        stub=cfg.pipeline,
        temporal=cfg.temporal,
        spatial=cfg.spatial,
        feedback_every=cfg.rates.feedback_every,
        switch_margin_ticks=cfg.rates.switch_margin_ticks,
        s_min=cfg.speed.s_min,
        s_cap=cfg.speed.s_cap,
        max_rel=cfg.speed.max_rel,
        config_snapshot=None,
    )
    kwargs.update(extra)
    return kwargs


def _load_calibration(cfg: Config, path: str | None) -> TimingCalibration:
    if path:
        with open(path, encoding="utf-8") as fh:
            return TimingCalibration.from_dict(json.load(fh))
    # ground-truth fallback: plant parameters as if perfectly calibrated
    return TimingCalibration(
        t_readout=cfg.plant.t_readout,
        t_camera=cfg.plant.t_camera,
        t_proprio=cfg.plant.t_proprio,
        t_motion=cfg.plant.tau,
        tau=cfg.plant.tau,
    )


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config, args.set)
    recording = record_sway(cfg.plant, cfg.rig, seed=cfg.seed)
    report = calibration_report(recording)
    calib = report.calibration
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(calib.to_dict(), fh, indent=1)
    rows = [
        ("t_readout", calib.t_readout),
        ("t_camera", calib.t_camera),
        ("t_proprio", calib.t_proprio),
        ("t_motion", calib.t_motion),
        ("tau", calib.tau),
    ]
    print("delay      | measurement")
    print("-----------+------------")
    for name, value in rows:
        print(f"{name:10s} | {value * 1e3:7.1f} ms")
    print(f"screen delay (rig): {report.screen_delay * 1e3:.1f} ms")
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.speed_model and args.uniform_speed is not None:
        print("error: give either --speed-model or --uniform-speed, not both",
              file=sys.stderr)
        return EXIT_USAGE
    calib = _load_calibration(cfg, args.calibration)
    model = SpeedModel.load(args.speed_model) if args.speed_model else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.operator == "ui":
        # block on the browser console and run paced episodes through it
        args.listen = getattr(args, "listen", "127.0.0.1:8787")
        args.static_dir = None
        args.out = str(out_dir)
        return cmd_serve(args)
    outcomes = {}
    for ep in range(args.episodes):
        operator = None
        if args.operator == "scripted":
            operator = ScriptedOperator(
                cfg.task,
                target_in=cfg.operator.target_in,
                target_out=cfg.operator.target_out,
                anticipation=cfg.operator.anticipation,
                hold_after=cfg.operator.hold_after,
                max_rel=cfg.speed.max_rel,
            )
        result = run_episode(
            **_episode_kwargs(
                cfg,
                calibration=calib,
                speed_model=model,
                uniform_scale=args.uniform_speed,
                operator=operator,
                seed=cfg.seed * 1000 + args.round * 100 + ep,
                episode_id=args.round * 1000 + ep,
                round_index=args.round,
                stop_on_failure=args.operator != "scripted",
                config_snapshot={
                    "config": cfg.snapshot,
                    "uniform_scale": args.uniform_speed,
                    "round_index": args.round,
                    "episode_id": args.round * 1000 + ep,
                    "has_model": model is not None,
                },
            )
        )
        result.log.save(out_dir / f"ep_{args.round:02d}_{ep:04d}.jsonl")
        outcomes[result.outcome] = outcomes.get(result.outcome, 0) + 1
        log.info("episode %d: %s in %.2fs", ep, result.outcome, result.wall_time)
    print(json.dumps({"episodes": args.episodes, "outcomes": outcomes}))
    return EXIT_OK


def _iter_logs(logs_dir: str):
    paths = sorted(Path(logs_dir).glob("*.jsonl"))
    for path in paths:
        yield path, RolloutLog.load(path)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    entries = list(_iter_logs(args.logs))
    if not entries:
        print(f"error: no rollout logs in {args.logs}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.kind == "regressor":
        samples = []
        for path, rollout_log in entries:
            head = rollout_log.records[0]["data"]
            samples += samples_from_log(
                rollout_log,
                cfg.task,
                cfg.pipeline,
                episode_id=int(head.get("episode_id", 0)),
                round_index=int(head.get("round_index", 0)),
                discard_window=cfg.speed.discard_window,
            )
        model = train_regressor(
            samples,
            ridge=cfg.speed.ridge,
            s_min=cfg.speed.s_min,
            s_cap=cfg.speed.s_cap,
            round_decay=cfg.speed.round_decay,
        )
        print(json.dumps({"kind": "regressor", "samples": len(samples),
                          "training_loss": model.training_loss}))
    else:
        feats, speeds, labels = [], [], []
        horizon = 1.0
        for _, rollout_log in entries:
            ticks = rollout_log.select("tick")
            failure_times = [r["t"] for r in rollout_log.select("failure")]
            for rec in ticks:
                if rec["scale"] <= 0:
                    continue
                ctx = StepContext(
                    task=cfg.task,
                    progress=min(rec["progress"], 1.0),
                    position=np.asarray(rec["ref"], dtype=float),
                    tracking_error=0.0,
                    mean_joint_speed=path_speed(
                        cfg.task, min(rec["progress"], 1.0), cfg.pipeline.demo_dt
                    ),
                )
                feats.append(extract_features(ctx))
                speeds.append(rec["scale"])
                labels.append(
                    float(any(0 <= ft - rec["t"] <= horizon for ft in failure_times))
                )
        model, report = train_failure_model(
            np.stack(feats), np.array(speeds), np.array(labels),
            s_min=cfg.speed.s_min, s_cap=cfg.speed.s_cap,
        )
        print(json.dumps({"kind": "qmodel", "samples": len(speeds),
                          "monotone": report["speed_monotone_on_support"]}))
    model.save(args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = list(_iter_logs(args.logs))
    by_speed: dict = {}
    segment_files = []
    geom = analysis.SpeedupGeometry(
        chunk_duration=cfg.pipeline.chunk_period,
        prefix_overhead=cfg.pipeline.inference_latency
        + cfg.rates.switch_margin_ticks * cfg.spatial.h,
        unreliable_tail=cfg.pipeline.tail_count * cfg.pipeline.demo_dt,
    )
    for path, rollout_log in entries:
        head = rollout_log.records[0]["data"]
        speed = head.get("uniform_scale")
        key = speed if speed is not None else "model"
        for rec in rollout_log.select("failure"):
            by_speed.setdefault(key, []).append(
                (rec["progress"], rec.get("window") is not None)
            )
        by_speed.setdefault(key, by_speed.get(key, []))
        labels = analysis.classify_segments(
            rollout_log.records, cfg.plant.v_max_hw, cfg.plant.a_max_hw,
            cfg.plant.jerk_max_hw, geom, s_cap=cfg.speed.s_cap,
        )
        digest = hashlib.sha1(rollout_log.dumps().encode()).hexdigest()[:12]
        seg_path = out_dir / f"segments_{digest}.json"
        with open(seg_path, "w", encoding="utf-8") as fh:
            json.dump(
                [
                    {"start": s.start, "end": s.end, "label": s.label,
                     "binding": s.binding_quantity}
                    for s in labels
                ],
                fh, indent=1,
            )
        segment_files.append(str(seg_path))
    hist = analysis.failure_histogram(by_speed) if by_speed else {}
    hist_path = out_dir / "failure_histogram.json"
    with open(hist_path, "w", encoding="utf-8") as fh:
        json.dump({str(k): v for k, v in hist.items()}, fh, indent=1)
    print(json.dumps({"logs": len(entries), "histogram": str(hist_path),
                      "segment_files": len(segment_files)}))
    return EXIT_OK


class _UiAdapter:
    """Bridges WebSocket connections to the episode loop."""

    def __init__(self) -> None:
        self.connections = []
        self.inbox: queue.Queue = queue.Queue()
        self._lock = threading.Lock()

    def attach(self, conn) -> None:
        with self._lock:
            self.connections.append(conn)
        while conn.open:
            text = conn.recv_text()
            if text is None:
                break
            try:
                self.inbox.put(decode_message(text))
            except Exception:
                log.warning("dropping malformed UI message")
        with self._lock:
            if conn in self.connections:
                self.connections.remove(conn)

    def sink(self, msg) -> None:
        line = json.dumps(message_to_dict(msg))
        with self._lock:
            conns = list(self.connections)
        for conn in conns:
            conn.send_text(line)

    def poll(self) -> list:
        out = []
        while True:
            try:
                out.append(self.inbox.get_nowait())
            except queue.Empty:
                return out

    @property
    def connected(self) -> bool:
        with self._lock:
            return bool(self.connections)


def cmd_serve(args) -> int:
    from .ws import UiBridgeServer

    cfg = load_config(args.config, args.set)
    calib = _load_calibration(cfg, args.calibration)
    model = SpeedModel.load(args.speed_model) if args.speed_model else None
    host, _, port = args.listen.partition(":")
    try:
        server = UiBridgeServer(host or "127.0.0.1", int(port or 8787),
                                static_dir=args.static_dir)
    except OSError as exc:
        print(f"error: cannot listen on {args.listen}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    ui = _UiAdapter()
    server.start_background(ui.attach)
    print(f"ui bridge listening on {server.port}; waiting for a console...")
    try:
        import time as _time

        while not ui.connected:
            _time.sleep(0.05)
        episode = 0
        while ui.connected and (args.episodes == 0 or episode < args.episodes):
            result = run_episode(
                **_episode_kwargs(
                    cfg,
                    calibration=calib,
                    speed_model=model,
                    uniform_scale=None,
                    seed=cfg.seed * 1000 + episode,
                    episode_id=episode,
                    stop_on_failure=False,
                    ui=ui,
                    pace_real_time=True,
                ),
            )
            ui.sink(EventMsg(seq=0, kind="episode_end", timestamp=result.wall_time,
                             payload={"outcome": result.outcome,
                                      "wall_time": result.wall_time}))
            if args.out:
                out_dir = Path(args.out)
                out_dir.mkdir(parents=True, exist_ok=True)
                result.log.save(out_dir / f"ep_serve_{episode:04d}.jsonl")
            episode += 1
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunkdrive",
        description="Faster-than-demonstration execution for action-chunk policies.",
    )
    parser.add_argument("--log-level", default=os.environ.get("CHUNKDRIVE_LOG_LEVEL", "WARNING"))
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file (defaults built in)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set plant.tau=0.2")

    p = sub.add_parser("calibrate", parents=[common], help="run the simulated sway calibration")
    p.add_argument("--out", default=None, help="write the calibration JSON here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("rollout", parents=[common], help="run seeded episodes")
    p.add_argument("--calibration", default=None, help="calibration JSON (default: plant truth)")
    p.add_argument("--speed-model", default=None)
    p.add_argument("--uniform-speed", type=float, default=None)
    p.add_argument("--operator", choices=["none", "scripted", "ui"], default="none")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for rollout logs")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("train", parents=[common], help="train a speed model from logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--kind", choices=["regressor", "qmodel"], default="regressor")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", parents=[common], help="reports from rollout logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", parents=[common], help="run the UI bridge (real clock)")
    p.add_argument("--listen", default="127.0.0.1:8787")
    p.add_argument("--calibration", default=None)
    p.add_argument("--speed-model", default=None)
    p.add_argument("--static-dir", default=None, help="directory with the built console")
    p.add_argument("--episodes", type=int, default=0, help="0 = until the console disconnects")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
