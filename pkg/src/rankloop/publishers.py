"""Key-value publishing backends for the live parameter vector.

A publish is one atomic write of the JSON-serialized vector: readers see
either the previous document or the new one, never a partial state. The
previous document stays retrievable so a rollback can re-publish it verbatim.
"""

from __future__ import annotations

import json
import os
import socket
import socketserver
import threading
from pathlib import Path
from typing import Protocol

from .errors import PublishError


class KeyValuePublisher(Protocol):
    def publish(self, key: str, value: str) -> None: ...

    def get(self, key: str) -> str | None: ...


class InMemoryPublisher:
    """Process-local map; keeps a history so tests can assert write sequences."""

    def __init__(self):
        self._store: dict[str, str] = {}
        self.history: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def publish(self, key: str, value: str) -> None:
        with self._lock:
            self._store[key] = value
            self.history.append((key, value))

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._store.get(key)


class FilePublisher:
    """One file per key; writes go through a temp file and an atomic rename."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / (key.replace("/", "_").replace(":", "_") + ".json")

    def publish(self, key: str, value: str) -> None:
        target = self._path(key)
        tmp = target.with_suffix(".tmp")
        try:
            tmp.write_text(value, encoding="utf-8")
            os.replace(tmp, target)
        except OSError as exc:
            raise PublishError(f"file publish failed for {key!r}: {exc}") from exc

    def get(self, key: str) -> str | None:
        target = self._path(key)
        if not target.exists():
            return None
        return target.read_text(encoding="utf-8")


class TcpKeyValuePublisher:
    """Client for the line-oriented key-value protocol of :class:`KeyValueServer`."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def _request(self, line: str) -> str:
        try:
            with socket.create_connection((self.host, self.port), self.timeout) as conn:
                conn.sendall(line.encode("utf-8") + b"\n")
                reply = b""
                while not reply.endswith(b"\n"):
                    chunk = conn.recv(65536)
                    if not chunk:
                        break
                    reply += chunk
            return reply.decode("utf-8").rstrip("\n")
        except OSError as exc:
            raise PublishError(f"key-value endpoint unreachable: {exc}") from exc

    def publish(self, key: str, value: str) -> None:
        reply = self._request(f"SET {key} {json.dumps(value)}")
        if reply != "OK":
            raise PublishError(f"unexpected reply to SET: {reply!r}")

    def get(self, key: str) -> str | None:
        reply = self._request(f"GET {key}")
        if reply == "NIL":
            return None
        if reply.startswith("VALUE "):
            return json.loads(reply[len("VALUE "):])
        raise PublishError(f"unexpected reply to GET: {reply!r}")


class _KvHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        line = self.rfile.readline().decode("utf-8").strip()
        store = self.server.store  # type: ignore[attr-defined]
        lock = self.server.lock  # type: ignore[attr-defined]
        if line.startswith("SET "):
            _, key, payload = line.split(" ", 2)
            with lock:
                store[key] = json.loads(payload)
            self.wfile.write(b"OK\n")
        elif line.startswith("GET "):
            key = line.split(" ", 1)[1]
            with lock:
                value = store.get(key)
            if value is None:
                self.wfile.write(b"NIL\n")
            else:
                self.wfile.write(f"VALUE {json.dumps(value)}\n".encode("utf-8"))
        else:
            self.wfile.write(b"ERR\n")


class KeyValueServer:
    """Minimal in-process server backing the TCP publisher (tests, demos)."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._server = socketserver.ThreadingTCPServer((host, port), _KvHandler)
        self._server.daemon_threads = True
        self._server.store = {}  # type: ignore[attr-defined]
        self._server.lock = threading.Lock()  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    def start(self) -> "KeyValueServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "KeyValueServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
