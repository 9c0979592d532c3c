"""Build-cache services: hash equivalence, downloads mirror, sstate blobs.

One server process exposes three line-oriented TCP listeners (default ports
8001/8002/8003).  The hash-equivalence store maps task input hashes to a
canonical output identity so tasks whose inputs changed but whose outputs
did not can still be served from cache.  The downloads and sstate listeners
share one write-once blob store implementation with distinct roots.

Wire protocol (UTF-8 lines, ``\\n`` terminated, hashes lowercase 64-hex):

* hashserv:  ``QUERY <method> <taskhash>``  -> ``UNIHASH <u>`` | ``MISS``
             ``REPORT <method> <taskhash> <outhash>`` -> ``UNIHASH <u>``
* blobs:     ``GET <key>`` -> ``OK <size>\\n<raw bytes>`` | ``MISS``
             ``PUT <key> <size>\\n<raw bytes>`` -> ``OK`` | ``ERR conflict``

Malformed input yields ``ERR <reason>``.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import CacheConflictError, CacheError, CacheUnavailableError
from .hashing import is_hex64, sha256_text

logger = logging.getLogger(__name__)

MAX_KEY_BYTES = 255
MAX_BLOB_BYTES = 32 * 1024 * 1024
MAX_LINE_BYTES = 1024

DEFAULT_HASHSERV_PORT = 8001
DEFAULT_DOWNLOADS_PORT = 8002
DEFAULT_SSTATE_PORT = 8003


@dataclass(frozen=True)
class CacheEndpoints:
    host: str = "127.0.0.1"
    hashserv_port: int = DEFAULT_HASHSERV_PORT
    downloads_port: int = DEFAULT_DOWNLOADS_PORT
    sstate_port: int = DEFAULT_SSTATE_PORT

    def __post_init__(self):
        ports = [self.hashserv_port, self.downloads_port, self.sstate_port]
        nonzero = [p for p in ports if p != 0]
        if len(set(nonzero)) != len(nonzero):
            raise CacheError(f"cache ports must be distinct, got {ports}")


def _check_method(method: str) -> None:
    if not method or not method.isascii() or any(c.isspace() for c in method):
        raise CacheError(f"malformed method token {method!r}")


def _check_hex(value: str, what: str) -> None:
    if not is_hex64(value):
        raise CacheError(f"malformed {what}: expected lowercase 64-hex, got {value!r}")


def check_key(key: str) -> None:
    if not key or len(key) > MAX_KEY_BYTES:
        raise CacheError(f"key must be 1..{MAX_KEY_BYTES} bytes")
    if not key.isascii() or not all(33 <= ord(c) <= 126 for c in key):
        raise CacheError("key must be printable ASCII without whitespace")


class EquivalenceStore:
    """taskhash -> unihash mapping with first-reported-wins outhash equivalence.

    Reports are journaled; replaying the journal on startup reproduces the
    exact store state, so restarts lose nothing.
    """

    def __init__(self, journal: Path | None = None):
        self.by_taskhash: dict[tuple[str, str], str] = {}
        self.by_outhash: dict[tuple[str, str], str] = {}
        self._lock = threading.Lock()
        self._journal = journal
        if journal is not None and journal.is_file():
            with open(journal, encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    self._apply(rec["method"], rec["taskhash"], rec["outhash"])

    def _apply(self, method: str, taskhash: str, outhash: str) -> str:
        established = self.by_outhash.get((method, outhash))
        unihash = established if established is not None else taskhash
        self.by_outhash.setdefault((method, outhash), unihash)
        self.by_taskhash[(method, taskhash)] = unihash
        return unihash

    def report(self, method: str, taskhash: str, outhash: str) -> str:
        _check_method(method)
        _check_hex(taskhash, "taskhash")
        _check_hex(outhash, "outhash")
        with self._lock:
            unihash = self._apply(method, taskhash, outhash)
            if self._journal is not None:
                with open(self._journal, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(
                        {"method": method, "taskhash": taskhash, "outhash": outhash}
                    ) + "\n")
                    fh.flush()
        return unihash

    def query(self, method: str, taskhash: str) -> str | None:
        _check_method(method)
        _check_hex(taskhash, "taskhash")
        with self._lock:
            return self.by_taskhash.get((method, taskhash))

    def dump(self) -> dict:
        with self._lock:
            return {
                "by_taskhash": {f"{m} {t}": u for (m, t), u in sorted(self.by_taskhash.items())},
                "by_outhash": {f"{m} {o}": u for (m, o), u in sorted(self.by_outhash.items())},
            }


class BlobStore:
    """Write-once blob store backed by one file pair per key.

    Blobs live at ``objects/<sha256(key)>.bin`` with the key itself in a
    ``.key`` sidecar so the store can be enumerated after a restart.
    Re-putting identical bytes is a no-op; differing bytes is a conflict.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _paths(self, key: str) -> tuple[Path, Path]:
        stem = sha256_text(key)
        base = self.root / "objects"
        return base / f"{stem}.bin", base / f"{stem}.key"

    def put(self, key: str, data: bytes) -> None:
        check_key(key)
        if len(data) > MAX_BLOB_BYTES:
            raise CacheError(f"blob exceeds {MAX_BLOB_BYTES} bytes")
        blob_path, key_path = self._paths(key)
        with self._lock:
            if blob_path.exists():
                if blob_path.read_bytes() != data:
                    raise CacheConflictError(f"key {key!r} already holds different bytes")
                return
            tmp = blob_path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.rename(blob_path)
            key_path.write_text(key, encoding="utf-8")

    def get(self, key: str) -> bytes | None:
        check_key(key)
        blob_path, _ = self._paths(key)
        with self._lock:
            if not blob_path.exists():
                return None
            return blob_path.read_bytes()

    def dump(self) -> dict[str, bytes]:
        out = {}
        with self._lock:
            for key_path in sorted((self.root / "objects").glob("*.key")):
                key = key_path.read_text(encoding="utf-8")
                out[key] = key_path.with_suffix(".bin").read_bytes()
        return out


def _read_line(rfile) -> str | None:
    raw = rfile.readline(MAX_LINE_BYTES + 1)
    if not raw:
        return None
    if len(raw) > MAX_LINE_BYTES:
        raise CacheError("request line too long")
    return raw.decode("utf-8", errors="replace").rstrip("\r\n")


class _HashservHandler(socketserver.StreamRequestHandler):
    def handle(self):
        store: EquivalenceStore = self.server.store  # type: ignore[attr-defined]
        while True:
            try:
                line = _read_line(self.rfile)
            except CacheError as exc:
                self.wfile.write(f"ERR {exc}\n".encode("utf-8"))
                return
            if line is None:
                return
            parts = line.split()
            try:
                if len(parts) == 3 and parts[0] == "QUERY":
                    unihash = store.query(parts[1], parts[2])
                    reply = f"UNIHASH {unihash}" if unihash is not None else "MISS"
                elif len(parts) == 4 and parts[0] == "REPORT":
                    reply = "UNIHASH " + store.report(parts[1], parts[2], parts[3])
                else:
                    raise CacheError(f"malformed request {line!r}")
            except CacheError as exc:
                reply = f"ERR {exc}"
            self.wfile.write((reply + "\n").encode("utf-8"))


class _BlobHandler(socketserver.StreamRequestHandler):
    def handle(self):
        store: BlobStore = self.server.store  # type: ignore[attr-defined]
        while True:
            try:
                line = _read_line(self.rfile)
            except CacheError as exc:
                self.wfile.write(f"ERR {exc}\n".encode("utf-8"))
                return
            if line is None:
                return
            parts = line.split()
            if len(parts) == 2 and parts[0] == "GET":
                try:
                    data = store.get(parts[1])
                except CacheError as exc:
                    self.wfile.write(f"ERR {exc}\n".encode("utf-8"))
                    continue
                if data is None:
                    self.wfile.write(b"MISS\n")
                else:
                    self.wfile.write(f"OK {len(data)}\n".encode("utf-8") + data)
            elif len(parts) == 3 and parts[0] == "PUT":
                try:
                    size = int(parts[2])
                    if size < 0 or size > MAX_BLOB_BYTES:
                        raise ValueError
                except ValueError:
                    # Cannot trust the framing after a bad size; close.
                    self.wfile.write(b"ERR malformed size\n")
                    return
                data = self.rfile.read(size)
                if len(data) != size:
                    return
                try:
                    store.put(parts[1], data)
                    reply = "OK"
                except CacheConflictError:
                    reply = "ERR conflict"
                except CacheError as exc:
                    reply = f"ERR {exc}"
                self.wfile.write((reply + "\n").encode("utf-8"))
            else:
                self.wfile.write(f"ERR malformed request {line!r}\n".encode("utf-8"))


class _Listener(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, handler, store):
        self.store = store
        super().__init__(addr, handler)


class CacheServer:
    """Running cache service: three listeners over persistent stores."""

    def __init__(self, cfg: CacheEndpoints, data_dir: Path | str):
        data_dir = Path(data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        self.equivalence = EquivalenceStore(journal=data_dir / "hashserv.jsonl")
        self.downloads = BlobStore(data_dir / "downloads")
        self.sstate = BlobStore(data_dir / "sstate")
        try:
            self._listeners = [
                _Listener((cfg.host, cfg.hashserv_port), _HashservHandler, self.equivalence),
                _Listener((cfg.host, cfg.downloads_port), _BlobHandler, self.downloads),
                _Listener((cfg.host, cfg.sstate_port), _BlobHandler, self.sstate),
            ]
        except OSError as exc:
            raise CacheError(f"cannot bind cache ports: {exc}") from exc
        self.endpoints = CacheEndpoints(
            host=cfg.host,
            hashserv_port=self._listeners[0].server_address[1],
            downloads_port=self._listeners[1].server_address[1],
            sstate_port=self._listeners[2].server_address[1],
        )
        self._threads: list[threading.Thread] = []

    def start(self) -> "CacheServer":
        for listener in self._listeners:
            thread = threading.Thread(target=listener.serve_forever, daemon=True)
            thread.start()
            self._threads.append(thread)
        logger.info(
            "cache server on %s ports %d/%d/%d",
            self.endpoints.host, self.endpoints.hashserv_port,
            self.endpoints.downloads_port, self.endpoints.sstate_port,
        )
        return self

    def stop(self) -> None:
        for listener in self._listeners:
            listener.shutdown()
            listener.server_close()
        for thread in self._threads:
            thread.join(timeout=5)
        self._threads.clear()

    def __enter__(self) -> "CacheServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(cfg: CacheEndpoints, data_dir: Path | str) -> CacheServer:
    """Start the three cache listeners; returns a stoppable handle."""
    return CacheServer(cfg, data_dir).start()


class _Conn:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise CacheUnavailableError(f"cannot reach cache at {host}:{port}: {exc}") from exc
        self.rfile = self.sock.makefile("rb")

    def request_line(self, line: str) -> str:
        try:
            self.sock.sendall((line + "\n").encode("utf-8"))
            reply = self.rfile.readline()
        except OSError as exc:
            raise CacheUnavailableError(f"cache connection lost: {exc}") from exc
        if not reply:
            raise CacheUnavailableError("cache connection closed")
        return reply.decode("utf-8").rstrip("\r\n")

    def send_raw(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise CacheUnavailableError(f"cache connection lost: {exc}") from exc

    def read_raw(self, size: int) -> bytes:
        try:
            data = self.rfile.read(size)
        except OSError as exc:
            raise CacheUnavailableError(f"cache connection lost: {exc}") from exc
        if data is None or len(data) != size:
            raise CacheUnavailableError("cache connection truncated")
        return data

    def close(self) -> None:
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


class CacheClient:
    """Request/response client for all three cache services.

    Holds one lazy connection per service; safe for use from multiple build
    workers (a lock serializes each request/response exchange).
    """

    def __init__(self, endpoints: CacheEndpoints, timeout: float = 10.0):
        self.endpoints = endpoints
        self.timeout = timeout
        self._conns: dict[str, _Conn] = {}
        self._lock = threading.Lock()

    def _conn(self, service: str) -> _Conn:
        if service not in self._conns:
            port = {
                "hashserv": self.endpoints.hashserv_port,
                "downloads": self.endpoints.downloads_port,
                "sstate": self.endpoints.sstate_port,
            }[service]
            self._conns[service] = _Conn(self.endpoints.host, port, self.timeout)
        return self._conns[service]

    def _drop(self, service: str) -> None:
        conn = self._conns.pop(service, None)
        if conn is not None:
            conn.close()

    def hashserv_query(self, method: str, taskhash: str) -> str | None:
        with self._lock:
            try:
                reply = self._conn("hashserv").request_line(f"QUERY {method} {taskhash}")
            except CacheUnavailableError:
                self._drop("hashserv")
                raise
        if reply == "MISS":
            return None
        if reply.startswith("UNIHASH "):
            return reply.split(" ", 1)[1]
        raise CacheError(f"hashserv: {reply}")

    def hashserv_report(self, method: str, taskhash: str, outhash: str) -> str:
        with self._lock:
            try:
                reply = self._conn("hashserv").request_line(
                    f"REPORT {method} {taskhash} {outhash}"
                )
            except CacheUnavailableError:
                self._drop("hashserv")
                raise
        if reply.startswith("UNIHASH "):
            return reply.split(" ", 1)[1]
        raise CacheError(f"hashserv: {reply}")

    def _blob_get(self, service: str, key: str) -> bytes | None:
        check_key(key)
        with self._lock:
            try:
                conn = self._conn(service)
                reply = conn.request_line(f"GET {key}")
                if reply == "MISS":
                    return None
                if reply.startswith("OK "):
                    return conn.read_raw(int(reply.split(" ", 1)[1]))
            except CacheUnavailableError:
                self._drop(service)
                raise
        raise CacheError(f"{service}: {reply}")

    def _blob_put(self, service: str, key: str, data: bytes) -> None:
        check_key(key)
        with self._lock:
            try:
                conn = self._conn(service)
                conn.send_raw(f"PUT {key} {len(data)}\n".encode("utf-8") + data)
                raw = conn.rfile.readline()
            except (CacheUnavailableError, OSError) as exc:
                self._drop(service)
                if isinstance(exc, CacheUnavailableError):
                    raise
                raise CacheUnavailableError(f"cache connection lost: {exc}") from exc
            if not raw:
                self._drop(service)
                raise CacheUnavailableError("cache connection closed")
            reply = raw.decode("utf-8").rstrip("\r\n")
        if reply == "OK":
            return
        if reply == "ERR conflict":
            raise CacheConflictError(f"key {key!r} already holds different bytes")
        raise CacheError(f"{service}: {reply}")

    def downloads_get(self, key: str) -> bytes | None:
        return self._blob_get("downloads", key)

    def downloads_put(self, key: str, data: bytes) -> None:
        self._blob_put("downloads", key, data)

    def sstate_get(self, key: str) -> bytes | None:
        return self._blob_get("sstate", key)

    def sstate_put(self, key: str, data: bytes) -> None:
        self._blob_put("sstate", key, data)

    def close(self) -> None:
        for service in list(self._conns):
            self._drop(service)

    def __enter__(self) -> "CacheClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
