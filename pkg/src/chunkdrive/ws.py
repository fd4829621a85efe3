"""Minimal RFC 6455 WebSocket server for the browser operator console.

Serves two things on one port: static files (the built console) over plain
HTTP GET, and a WebSocket endpoint at /ws that relays newline-delimited
JSON wire messages in both directions. Only what the console needs is
implemented: no extensions, no fragmentation on send, text frames only.
"""

from __future__ import annotations

import base64
import hashlib
import socket
import struct
import threading
from pathlib import Path

__all__ = ["websocket_accept_key", "WsConnection", "UiBridgeServer"]

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
}


def websocket_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


class WsConnection:
    """One accepted WebSocket connection (post-handshake)."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._send_lock = threading.Lock()
        self._buffer = b""
        self.open = True

    def send_text(self, text: str) -> None:
        payload = text.encode("utf-8")
        header = bytearray([0x81])  # FIN + text opcode
        n = len(payload)
        if n < 126:
            header.append(n)
        elif n < 1 << 16:
            header.append(126)
            header += struct.pack(">H", n)
        else:
            header.append(127)
            header += struct.pack(">Q", n)
        with self._send_lock:
            try:
                self._sock.sendall(bytes(header) + payload)
            except OSError:
                self.open = False

    def _read_exact(self, n: int) -> bytes | None:
        while len(self._buffer) < n:
            try:
                data = self._sock.recv(65536)
            except OSError:
                return None
            if not data:
                return None
            self._buffer += data
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def recv_text(self) -> str | None:
        """Next text message; None once the connection closes."""
        while True:
            head = self._read_exact(2)
            if head is None:
                self.open = False
                return None
            opcode = head[0] & 0x0F
            masked = head[1] & 0x80
            length = head[1] & 0x7F
            if length == 126:
                ext = self._read_exact(2)
                if ext is None:
                    return None
                length = struct.unpack(">H", ext)[0]
            elif length == 127:
                ext = self._read_exact(8)
                if ext is None:
                    return None
                length = struct.unpack(">Q", ext)[0]
            mask = self._read_exact(4) if masked else b"\x00" * 4
            if mask is None:
                return None
            payload = self._read_exact(length)
            if payload is None:
                return None
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode == 0x8:  # close
                self.open = False
                return None
            if opcode == 0x9:  # ping -> pong
                with self._send_lock:
                    try:
                        self._sock.sendall(bytes([0x8A, len(payload)]) + payload)
                    except OSError:
                        self.open = False
                        return None
                continue
            if opcode in (0x1, 0x2):
                return payload.decode("utf-8", errors="replace")

    def close(self) -> None:
        self.open = False
        try:
            self._sock.sendall(bytes([0x88, 0x00]))
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class UiBridgeServer:
    """HTTP static file server plus /ws WebSocket endpoint."""

    def __init__(self, host: str, port: int, static_dir: str | None = None) -> None:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(4)
        self.port = self._listener.getsockname()[1]
        self.static_dir = Path(static_dir) if static_dir else None
        self._on_connect = None
        self._thread = None
        self._running = False
        self.connections: list[WsConnection] = []

    def serve_forever(self, on_connect) -> None:
        """Accept loop; `on_connect(conn)` runs in a thread per WS client."""
        self._on_connect = on_connect
        self._running = True
        while self._running:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                break
            threading.Thread(target=self._handle, args=(sock,), daemon=True).start()

    def start_background(self, on_connect) -> None:
        self._thread = threading.Thread(
            target=self.serve_forever, args=(on_connect,), daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in list(self.connections):
            conn.close()

    # -- internals -----------------------------------------------------------

    def _handle(self, sock: socket.socket) -> None:
        sock.settimeout(10.0)
        buffer = b""
        try:
            while b"\r\n\r\n" not in buffer:
                data = sock.recv(65536)
                if not data:
                    sock.close()
                    return
                buffer += data
        except OSError:
            sock.close()
            return
        head, _, rest = buffer.partition(b"\r\n\r\n")
        lines = head.decode("latin-1").split("\r\n")
        request = lines[0].split(" ")
        headers = {}
        for line in lines[1:]:
            if ":" in line:
                k, v = line.split(":", 1)
                headers[k.strip().lower()] = v.strip()
        path = request[1] if len(request) > 1 else "/"

        if headers.get("upgrade", "").lower() == "websocket":
            key = headers.get("sec-websocket-key", "")
            accept = websocket_accept_key(key)
            response = (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
            )
            sock.sendall(response.encode("latin-1"))
            sock.settimeout(None)
            conn = WsConnection(sock)
            conn._buffer = rest
            self.connections.append(conn)
            try:
                if self._on_connect is not None:
                    self._on_connect(conn)
            finally:
                if conn in self.connections:
                    self.connections.remove(conn)
                conn.close()
            return

        self._serve_static(sock, path)

    def _serve_static(self, sock: socket.socket, path: str) -> None:
        body = b"not found"
        status = "404 Not Found"
        ctype = "text/plain"
        if self.static_dir is not None:
            rel = path.lstrip("/") or "index.html"
            target = (self.static_dir / rel).resolve()
            if str(target).startswith(str(self.static_dir.resolve())) and target.is_file():
                body = target.read_bytes()
                status = "200 OK"
                ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        response = (
            f"HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\n"
            f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n"
        ).encode("latin-1") + body
        try:
            sock.sendall(response)
        except OSError:
            pass
        sock.close()
