"""Wire protocol between server (policy side) and client (robot side).

Newline-delimited JSON framing: one message per line, UTF-8. Every message
carries a schema version ``v`` and a per-direction monotonic sequence
number ``seq``. Four message types flow over the link:

- ``chunk``   server -> client: retimed waypoints to execute.
- ``feedback`` client -> server: reported state and task progress.
- ``throttle`` operator -> server: relative speed input in [-1, 1].
- ``event``   either direction: failure / intervention / episode_end /
  scale (the server's echo of the model and effective speed scale, which
  is what operator UIs display).

Floats round-trip exactly (shortest-repr decimal encoding). The full
per-type field list lives in protocol.md at the repository root.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SCHEMA_VERSION",
    "ChunkMsg",
    "FeedbackMsg",
    "ThrottleMsg",
    "EventMsg",
    "DecodeError",
    "encode_message",
    "decode_message",
    "Mailbox",
    "TcpLink",
]

SCHEMA_VERSION = 1

EVENT_KINDS = ("failure", "intervention", "episode_end", "scale")


class DecodeError(ValueError):
    """Malformed or unsupported wire line."""


@dataclass
class ChunkMsg:
    seq: int
    chunk_id: int
    waypoints: list  # H x J
    durations: list  # H-1
    origin_time: float
    prefix_len: int

    type: str = field(default="chunk", init=False)


@dataclass
class FeedbackMsg:
    seq: int
    timestamp: float
    reported_q: list
    executed_chunk_id: int
    progress: float

    type: str = field(default="feedback", init=False)


@dataclass
class ThrottleMsg:
    seq: int
    timestamp: float
    operator_input: float

    type: str = field(default="throttle", init=False)


@dataclass
class EventMsg:
    seq: int
    kind: str
    timestamp: float
    payload: dict = field(default_factory=dict)

    type: str = field(default="event", init=False)

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind: {self.kind}")


def _as_float_list(values) -> list:
    arr = np.asarray(values, dtype=float)
    return [[float(v) for v in row] for row in arr] if arr.ndim == 2 else [
        float(v) for v in arr
    ]


def message_to_dict(msg) -> dict:
    if isinstance(msg, ChunkMsg):
        return {
            "v": SCHEMA_VERSION,
            "seq": msg.seq,
            "type": "chunk",
            "chunk_id": msg.chunk_id,
            "waypoints": _as_float_list(msg.waypoints),
            "durations": _as_float_list(msg.durations),
            "origin_time": msg.origin_time,
            "prefix_len": msg.prefix_len,
        }
    if isinstance(msg, FeedbackMsg):
        return {
            "v": SCHEMA_VERSION,
            "seq": msg.seq,
            "type": "feedback",
            "timestamp": msg.timestamp,
            "reported_q": _as_float_list(msg.reported_q),
            "executed_chunk_id": msg.executed_chunk_id,
            "progress": msg.progress,
        }
    if isinstance(msg, ThrottleMsg):
        return {
            "v": SCHEMA_VERSION,
            "seq": msg.seq,
            "type": "throttle",
            "timestamp": msg.timestamp,
            "operator_input": msg.operator_input,
        }
    if isinstance(msg, EventMsg):
        return {
            "v": SCHEMA_VERSION,
            "seq": msg.seq,
            "type": "event",
            "kind": msg.kind,
            "timestamp": msg.timestamp,
            "payload": msg.payload,
        }
    raise TypeError(f"not a wire message: {type(msg)!r}")


def encode_message(msg) -> bytes:
    """One newline-terminated JSON line."""
    return (json.dumps(message_to_dict(msg)) + "\n").encode("utf-8")


def message_from_dict(data: dict):
    if not isinstance(data, dict):
        raise DecodeError("wire message must be a JSON object")
    version = data.get("v")
    if version != SCHEMA_VERSION:
        raise DecodeError(f"unsupported schema version: {version!r}")
    mtype = data.get("type")
    try:
        if mtype == "chunk":
            return ChunkMsg(
                seq=int(data["seq"]),
                chunk_id=int(data["chunk_id"]),
                waypoints=data["waypoints"],
                durations=data["durations"],
                origin_time=float(data["origin_time"]),
                prefix_len=int(data["prefix_len"]),
            )
        if mtype == "feedback":
            return FeedbackMsg(
                seq=int(data["seq"]),
                timestamp=float(data["timestamp"]),
                reported_q=data["reported_q"],
                executed_chunk_id=int(data["executed_chunk_id"]),
                progress=float(data["progress"]),
            )
        if mtype == "throttle":
            return ThrottleMsg(
                seq=int(data["seq"]),
                timestamp=float(data["timestamp"]),
                operator_input=float(data["operator_input"]),
            )
        if mtype == "event":
            return EventMsg(
                seq=int(data["seq"]),
                kind=str(data["kind"]),
                timestamp=float(data["timestamp"]),
                payload=data.get("payload", {}),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"bad {mtype!r} message: {exc}") from exc
    raise DecodeError(f"unknown message type: {mtype!r}")


def decode_message(line: bytes | str):
    text = line.decode("utf-8") if isinstance(line, bytes) else line
    text = text.strip()
    if not text:
        raise DecodeError("empty line")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"invalid JSON near {text[:60]!r}: {exc}") from exc
    return message_from_dict(data)


class Mailbox:
    """Deterministic in-process transport with scheduled delivery times."""

    def __init__(self) -> None:
        self._pending: list = []  # (available_at, insertion order, msg)
        self._counter = 0

    def send(self, msg, available_at: float) -> None:
        self._pending.append((available_at, self._counter, msg))
        self._counter += 1
        self._pending.sort(key=lambda item: (item[0], item[1]))

    def poll(self, now: float) -> list:
        due = [m for t, _, m in self._pending if t <= now + 1e-12]
        self._pending = [item for item in self._pending if item[0] > now + 1e-12]
        return due

    def __len__(self) -> int:
        return len(self._pending)


class TcpLink:
    """Line-framed TCP link carrying wire messages (real-clock mode)."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._buffer = b""
        self._send_lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0) -> "TcpLink":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(timeout)
        return cls(sock)

    def send(self, msg) -> None:
        with self._send_lock:
            self._sock.sendall(encode_message(msg))

    def recv(self):
        """Next message, or None when the peer closed the connection."""
        while b"\n" not in self._buffer:
            try:
                data = self._sock.recv(65536)
            except socket.timeout:
                return None
            if not data:
                return None
            self._buffer += data
        line, self._buffer = self._buffer.split(b"\n", 1)
        return decode_message(line)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
