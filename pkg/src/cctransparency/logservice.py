"""HTTP front end for a transparency log, with misbehaving modes.

Endpoints (all responses are canonical JSON, ``application/json``)::

    POST /entries                        body: statement bytes  -> {"index": i}
    GET  /checkpoint                                            -> checkpoint
    GET  /proof/inclusion?index=I&size=N                        -> inclusion proof
    GET  /proof/consistency?from=M&to=N                         -> consistency proof
    GET  /entries?start=S&end=E          (E exclusive)          -> {"start": S, "entries": [b64...]}

Errors are ``{"error": reason}`` with a 4xx status. Every request may
carry ``X-Client-Id``; adversarial modes route on it.

``split_view`` keeps a second tree that diverges from the main one once
``fork_at`` leaves exist: victims read and write the fork, everyone else
the main tree, and both are signed with the operator key.
``delayed_visibility`` hides the newest ``delay_entries`` leaves from
victims.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping, Optional, Union

from .encoding import EncodingError, b64d, b64e, canonical_json, parse_json
from .identity import Identity
from .merkle_log import (
    Checkpoint,
    ConsistencyProof,
    InclusionProof,
    LogError,
    MerkleLog,
    OutOfRange,
)

log = logging.getLogger(__name__)

CLIENT_ID_HEADER = "X-Client-Id"
MAX_BODY = 1 << 20
MAX_ENTRIES_PER_REQUEST = 1000


class Mode(str, Enum):
    HONEST = "honest"
    SPLIT_VIEW = "split_view"
    DELAYED_VISIBILITY = "delayed_visibility"


@dataclass(frozen=True)
class ServiceConfig:
    listen: str = "127.0.0.1:8080"
    mode: Mode = Mode.HONEST
    fork_at: Optional[int] = None
    victim_clients: frozenset[str] = field(default_factory=frozenset)
    delay_entries: int = 0
    storage_path: Optional[str] = None
    origin: str = "cct.example/log"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "victim_clients", frozenset(self.victim_clients))
        if self.mode is Mode.SPLIT_VIEW and (self.fork_at is None or self.fork_at < 0):
            raise ValueError("split_view mode needs fork_at >= 0")
        if self.mode is Mode.DELAYED_VISIBILITY and self.delay_entries < 1:
            raise ValueError("delayed_visibility mode needs delay_entries >= 1")

    @property
    def address(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)


class LogUnavailable(Exception):
    """The log could not be reached; says nothing about trust."""


class LogRequestError(Exception):
    def __init__(self, status: int, reason: str) -> None:
        super().__init__(f"HTTP {status}: {reason}")
        self.status = status
        self.reason = reason


class _BadRequest(Exception):
    def __init__(self, status: int, reason: str) -> None:
        super().__init__(reason)
        self.status = status
        self.reason = reason


def _int_param(query: Mapping[str, str], name: str) -> int:
    raw = query.get(name)
    if raw is None:
        raise _BadRequest(400, f"missing query parameter {name!r}")
    if not raw.isdigit():
        raise _BadRequest(400, f"query parameter {name!r} must be a non-negative integer")
    return int(raw)


class LogService:
    """Request handling for one log, independent of the HTTP server."""

    def __init__(
        self,
        config: ServiceConfig,
        operator: Identity,
        *,
        clock: Callable[[], int] | None = None,
        log_: MerkleLog | None = None,
    ) -> None:
        self.config = config
        self.operator = operator
        if log_ is None:
            stored = config.storage_path
            if stored and os.path.exists(stored) and os.path.getsize(stored):
                log_ = MerkleLog.load(stored, config.origin, operator, clock=clock)
            else:
                log_ = MerkleLog(config.origin, operator, stored, clock=clock)
        self.main = log_
        self.clock = self.main.clock
        self.fork: MerkleLog | None = None
        if config.mode is Mode.SPLIT_VIEW:
            self.fork = self.main.copy()
        self._lock = threading.Lock()

    @property
    def origin(self) -> str:
        return self.main.origin

    def is_victim(self, client_id: str | None) -> bool:
        return client_id is not None and client_id in self.config.victim_clients

    def _view(self, client_id: str | None) -> tuple[MerkleLog, int]:
        if self.config.mode is Mode.SPLIT_VIEW and self.is_victim(client_id):
            assert self.fork is not None
            return self.fork, self.fork.size
        if self.config.mode is Mode.DELAYED_VISIBILITY and self.is_victim(client_id):
            return self.main, max(0, self.main.size - self.config.delay_entries)
        return self.main, self.main.size

    # -- operations -------------------------------------------------------

    def append(self, payload: bytes, client_id: str | None = None) -> int:
        with self._lock:
            if self.config.mode is not Mode.SPLIT_VIEW:
                return self.main.append(payload)
            assert self.fork is not None and self.config.fork_at is not None
            if self.main.size < self.config.fork_at:
                index = self.main.append(payload)
                self.fork.append(payload)
                return index
            target = self.fork if self.is_victim(client_id) else self.main
            return target.append(payload)

    def checkpoint(self, client_id: str | None = None) -> Checkpoint:
        tree, visible = self._view(client_id)
        if visible == tree.size:
            return tree.latest_checkpoint()
        return tree.sign_checkpoint(visible)

    def inclusion_proof(self, index: int, size: int, client_id: str | None = None) -> InclusionProof:
        tree, visible = self._view(client_id)
        if size > visible:
            raise OutOfRange(f"unknown tree size {size}")
        return tree.prove_inclusion(index, size)

    def consistency_proof(self, old: int, new: int, client_id: str | None = None) -> ConsistencyProof:
        tree, visible = self._view(client_id)
        if new > visible:
            raise OutOfRange(f"unknown tree size {new}")
        return tree.prove_consistency(old, new)

    def entries(self, start: int, end: int, client_id: str | None = None) -> list[bytes]:
        tree, visible = self._view(client_id)
        if end > visible:
            raise OutOfRange(f"entries beyond tree size {visible}")
        if end - start > MAX_ENTRIES_PER_REQUEST:
            raise _BadRequest(400, f"at most {MAX_ENTRIES_PER_REQUEST} entries per request")
        return tree.entries(start, end)

    # -- wire -------------------------------------------------------------

    def handle(
        self,
        method: str,
        path: str,
        query: Mapping[str, str],
        headers: Mapping[str, str],
        body: bytes = b"",
    ) -> tuple[int, bytes]:
        wanted = CLIENT_ID_HEADER.lower()
        client_id = next((v for k, v in headers.items() if k.lower() == wanted), None) or None
        try:
            result = self._dispatch(method, path, query, body, client_id)
            return 200, canonical_json(result)
        except _BadRequest as exc:
            return exc.status, canonical_json({"error": exc.reason})
        except OutOfRange as exc:
            return 404, canonical_json({"error": str(exc)})
        except (ValueError, LogError) as exc:
            return 400, canonical_json({"error": str(exc)})

    def _dispatch(self, method: str, path: str, query: Mapping[str, str], body: bytes, client_id: str | None) -> dict:
        if path == "/entries" and method == "POST":
            if not body:
                raise _BadRequest(400, "empty body")
            if len(body) > MAX_BODY:
                raise _BadRequest(413, "body too large")
            try:
                if not isinstance(parse_json(body), dict):
                    raise _BadRequest(400, "body must be a JSON object")
            except EncodingError as exc:
                raise _BadRequest(400, f"body is not JSON: {exc}") from exc
            return {"index": self.append(body, client_id)}
        if method != "GET":
            if path in ("/entries", "/checkpoint", "/proof/inclusion", "/proof/consistency"):
                raise _BadRequest(405, f"{method} not allowed on {path}")
            raise _BadRequest(404, f"no such endpoint {path}")
        if path == "/checkpoint":
            return self.checkpoint(client_id).to_dict()
        if path == "/proof/inclusion":
            return self.inclusion_proof(_int_param(query, "index"), _int_param(query, "size"), client_id).to_dict()
        if path == "/proof/consistency":
            return self.consistency_proof(_int_param(query, "from"), _int_param(query, "to"), client_id).to_dict()
        if path == "/entries":
            start, end = _int_param(query, "start"), _int_param(query, "end")
            if end < start:
                raise _BadRequest(400, "end before start")
            return {"start": start, "entries": [b64e(e) for e in self.entries(start, end, client_id)]}
        raise _BadRequest(404, f"no such endpoint {path}")


# ---------------------------------------------------------------------------
# HTTP server


class _Handler(BaseHTTPRequestHandler):
    service: LogService
    protocol_version = "HTTP/1.1"

    def _respond(self, status: int, payload: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _run(self, method: str) -> None:
        parsed = urllib.parse.urlsplit(self.path)
        query = {k: v[-1] for k, v in urllib.parse.parse_qs(parsed.query).items()}
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self._respond(413, canonical_json({"error": "body too large"}))
            return
        body = self.rfile.read(length) if length else b""
        headers = {k: v for k, v in self.headers.items()}
        status, payload = self.service.handle(method, parsed.path, query, headers, body)
        self._respond(status, payload)

    def do_GET(self) -> None:  # noqa: N802
        self._run("GET")

    def do_POST(self) -> None:  # noqa: N802
        self._run("POST")

    def log_message(self, fmt: str, *args: object) -> None:
        log.debug("%s - %s", self.address_string(), fmt % args)


def make_server(service: LogService, address: tuple[str, int] | None = None) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer(address or service.config.address, handler)
    server.daemon_threads = True
    return server


def serve(config: ServiceConfig, operator: Identity, *, clock: Callable[[], int] | None = None) -> None:
    """Run the service until interrupted."""
    service = LogService(config, operator, clock=clock)
    server = make_server(service)
    host, port = server.server_address[:2]
    log.info("serving %s (%s mode) on http://%s:%s", config.origin, config.mode.value, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()


# ---------------------------------------------------------------------------
# Client

Transport = Callable[[str, str, Mapping[str, str], bytes, Mapping[str, str]], tuple[int, bytes]]


def http_transport(base_url: str, timeout: float = 10.0) -> Transport:
    base = base_url.rstrip("/")

    def send(method: str, path: str, query: Mapping[str, str], body: bytes, headers: Mapping[str, str]) -> tuple[int, bytes]:
        url = base + path
        if query:
            url += "?" + urllib.parse.urlencode(query)
        req = urllib.request.Request(url, data=body if method == "POST" else None, method=method)
        for k, v in headers.items():
            req.add_header(k, v)
        if method == "POST":
            req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read()
        except (urllib.error.URLError, OSError) as exc:
            raise LogUnavailable(f"{url}: {exc}") from exc

    return send


def local_transport(service: LogService) -> Transport:
    def send(method: str, path: str, query: Mapping[str, str], body: bytes, headers: Mapping[str, str]) -> tuple[int, bytes]:
        return service.handle(method, path, query, headers, body)

    return send


class LogClient:
    """Typed access to a log over any transport (HTTP or in-process)."""

    def __init__(self, transport: Transport, client_id: str | None = None) -> None:
        self._send = transport
        self.client_id = client_id

    @classmethod
    def http(cls, url: str, client_id: str | None = None, timeout: float = 10.0) -> "LogClient":
        return cls(http_transport(url, timeout), client_id)

    @classmethod
    def local(cls, target: Union[LogService, MerkleLog], client_id: str | None = None) -> "LogClient":
        if isinstance(target, MerkleLog):
            if target.operator is None:
                raise ValueError("log needs an operator key to serve checkpoints")
            target = LogService(ServiceConfig(origin=target.origin), target.operator, log_=target)
        return cls(local_transport(target), client_id)

    def with_client_id(self, client_id: str | None) -> "LogClient":
        return LogClient(self._send, client_id)

    def _call(self, method: str, path: str, query: Mapping[str, str] | None = None, body: bytes = b"") -> dict:
        headers = {CLIENT_ID_HEADER: self.client_id} if self.client_id else {}
        status, payload = self._send(method, path, {k: str(v) for k, v in (query or {}).items()}, body, headers)
        try:
            data = json.loads(payload.decode("utf-8")) if payload else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LogUnavailable(f"unparseable response from log ({status})") from exc
        if status != 200:
            raise LogRequestError(status, data.get("error", "unknown error") if isinstance(data, dict) else str(data))
        if not isinstance(data, dict):
            raise LogUnavailable("log response is not a JSON object")
        return data

    def append(self, payload: bytes) -> int:
        return int(self._call("POST", "/entries", body=payload)["index"])

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_dict(self._call("GET", "/checkpoint"))

    def inclusion_proof(self, index: int, size: int) -> InclusionProof:
        return InclusionProof.from_dict(self._call("GET", "/proof/inclusion", {"index": index, "size": size}))

    def consistency_proof(self, old_size: int, new_size: int) -> ConsistencyProof:
        return ConsistencyProof.from_dict(self._call("GET", "/proof/consistency", {"from": old_size, "to": new_size}))

    def entries(self, start: int, end: int) -> list[bytes]:
        out: list[bytes] = []
        pos = start
        while pos < end:
            stop = min(end, pos + MAX_ENTRIES_PER_REQUEST)
            data = self._call("GET", "/entries", {"start": pos, "end": stop})
            batch = [b64d(e) for e in data["entries"]]
            if len(batch) != stop - pos:
                raise LogUnavailable(f"log returned {len(batch)} entries for [{pos}, {stop})")
            out.extend(batch)
            pos = stop
        return out
