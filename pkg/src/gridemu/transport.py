"""Newline-delimited JSON request/response messaging between components.

Realtime mode speaks over loopback TCP, one request per connection. Stepped
mode skips sockets entirely; the stepped runtime pushes the same encoded
envelopes through :func:`dispatch` and orders deferred work with
:func:`stepped_deliver`.
"""

from __future__ import annotations

import enum
import errno
import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .errors import (AddressInUse, BindFailure, ConnectionRefused, GridError,
                     MalformedResponse, Timeout, TransportError, error_from_name)

log = logging.getLogger(__name__)


class Kind(str, enum.Enum):
    # requests
    SUBMIT_JOB = "SUBMIT_JOB"
    QUERY_STATUS = "QUERY_STATUS"
    FETCH_OUTPUT_LIST = "FETCH_OUTPUT_LIST"
    POLL_WAITING = "POLL_WAITING"
    REQUEST_JOB = "REQUEST_JOB"
    UPDATE_STATUS = "UPDATE_STATUS"
    REGISTER_OUTPUT = "REGISTER_OUTPUT"
    REGISTER_FILE = "REGISTER_FILE"
    LOOKUP = "LOOKUP"
    SNAPSHOT = "SNAPSHOT"
    ANNOUNCE = "ANNOUNCE"
    SUBMIT_AGENT = "SUBMIT_AGENT"
    START_AGENT = "START_AGENT"
    COMPLETE_AGENT = "COMPLETE_AGENT"
    UPLOAD = "UPLOAD"
    DOWNLOAD = "DOWNLOAD"
    STAT = "STAT"
    PING = "PING"
    SHUTDOWN = "SHUTDOWN"
    TICK = "TICK"  # stepped-mode timer and deferred-task delivery, never on the wire
    # responses
    PONG = "PONG"
    OK = "OK"
    ERROR = "ERROR"

    def __str__(self) -> str:
        return self.value


RESPONSE_KINDS = frozenset({Kind.PONG, Kind.OK, Kind.ERROR})


@dataclass(frozen=True)
class Message:
    msg_id: int
    sender: str
    kind: Kind
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"msg_id": self.msg_id, "sender": self.sender,
                "kind": self.kind.value, "payload": self.payload}


def encode(msg: Message) -> bytes:
    return (json.dumps(msg.to_dict(), separators=(",", ":"), ensure_ascii=False) + "\n").encode()


def decode(line: bytes | str) -> Message:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        doc = json.loads(line)
        msg_id, sender, kind, payload = doc["msg_id"], doc["sender"], doc["kind"], doc["payload"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponse(f"undecodable message: {line[:80]!r}") from exc
    if not isinstance(msg_id, int) or isinstance(msg_id, bool) or not isinstance(sender, str) \
            or not isinstance(payload, dict):
        raise MalformedResponse(f"bad envelope field types: {line[:80]!r}")
    try:
        kind = Kind(kind)
    except ValueError as exc:
        raise MalformedResponse(f"unknown message kind {kind!r}") from exc
    return Message(msg_id, sender, kind, payload)


@dataclass(frozen=True)
class Endpoint:
    component: str
    address: str  # "host:port" or "inproc:<name>"
    mode: str = "realtime"

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.address.rpartition(":")
        return host, int(port)


Handler = Callable[[Message], dict]


def dispatch(handler: Handler, request: Message, responder: str) -> Message:
    """Run ``handler`` and wrap its outcome as a response envelope."""
    try:
        payload = handler(request)
        kind = Kind.PONG if request.kind is Kind.PING else Kind.OK
        return Message(request.msg_id, responder, kind, payload or {})
    except GridError as exc:
        return Message(request.msg_id, responder, Kind.ERROR,
                       {"error": exc.code, "message": exc.message, "info": exc.info})
    except Exception as exc:  # a handler bug must still produce one response
        log.exception("handler for %s failed", request.kind)
        return Message(request.msg_id, responder, Kind.ERROR,
                       {"error": "RemoteError", "message": f"{type(exc).__name__}: {exc}", "info": {}})


def unwrap(request: Message, response: Message) -> dict:
    """Return the response payload, re-raising a remote error locally."""
    if response.msg_id != request.msg_id:
        raise MalformedResponse(f"response msg_id {response.msg_id} != request {request.msg_id}")
    if response.kind not in RESPONSE_KINDS:
        raise MalformedResponse(f"response has request kind {response.kind}")
    if response.kind is Kind.ERROR:
        p = response.payload
        raise error_from_name(p.get("error", "RemoteError"), p.get("message", ""), p.get("info"))
    return response.payload


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    block_on_close = False


class Listener:
    """A running TCP listener. ``stop`` is idempotent."""

    def __init__(self, endpoint: Endpoint, handler: Handler):
        self.handler = handler
        self.component = endpoint.component
        host, port = endpoint.host_port
        listener = self

        class _RequestHandler(socketserver.StreamRequestHandler):
            def handle(self):
                line = self.rfile.readline()
                if not line:
                    return
                try:
                    request = decode(line)
                except MalformedResponse as exc:
                    self.wfile.write(encode(Message(0, listener.component, Kind.ERROR,
                                                    {"error": "MalformedResponse", "message": str(exc), "info": {}})))
                    return
                response = dispatch(listener.handler, request, listener.component)
                if request.kind is Kind.SHUTDOWN and response.kind is not Kind.ERROR:
                    # close before answering so the caller never races a live socket
                    listener._close()
                try:
                    self.wfile.write(encode(response))
                except OSError:
                    pass

        try:
            self._server = _Server((host, port), _RequestHandler, bind_and_activate=False)
            self._server.server_bind()
            self._server.server_activate()
        except OSError as exc:
            try:
                self._server.server_close()
            except Exception:
                pass
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(f"{host}:{port} already in use", address=f"{host}:{port}") from exc
            raise BindFailure(f"cannot bind {host}:{port}: {exc}", address=f"{host}:{port}") from exc
        bound_host, bound_port = self._server.server_address[:2]
        self.endpoint = Endpoint(endpoint.component, f"{bound_host}:{bound_port}", endpoint.mode)
        self._closed = threading.Event()
        self._close_lock = threading.Lock()
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.02},
                                        name=f"listener-{self.component}", daemon=True)
        self._thread.start()

    @property
    def address(self) -> str:
        return self.endpoint.address

    @property
    def running(self) -> bool:
        return not self._closed.is_set()

    def _close(self) -> None:
        with self._close_lock:
            if self._closed.is_set():
                return
            self._server.shutdown()
            self._server.server_close()
            self._closed.set()

    def stop(self) -> None:
        self._close()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=2)


def serve(endpoint: Endpoint, handler: Handler) -> Listener:
    return Listener(endpoint, handler)


def call(target: Endpoint | str, message: Message, timeout_ms: int = 5000) -> Message:
    """Send one request and block for its correlated response. No retries."""
    address = target.address if isinstance(target, Endpoint) else target
    host, _, port = address.rpartition(":")
    timeout = max(timeout_ms, 1) / 1000.0
    try:
        sock = socket.create_connection((host, int(port)), timeout=timeout)
    except ConnectionRefusedError as exc:
        raise ConnectionRefused(f"connection refused by {address}", address=address) from exc
    except socket.timeout as exc:
        raise Timeout(f"connect to {address} timed out", address=address) from exc
    except OSError as exc:
        raise ConnectionRefused(f"cannot connect to {address}: {exc}", address=address) from exc
    try:
        with sock, sock.makefile("rwb") as stream:
            stream.write(encode(message))
            stream.flush()
            line = stream.readline()
    except socket.timeout as exc:
        raise Timeout(f"{message.kind} to {address} timed out after {timeout_ms} ms",
                      address=address) from exc
    except OSError as exc:
        raise TransportError(f"{message.kind} to {address} failed: {exc}", address=address) from exc
    if not line:
        raise MalformedResponse(f"{address} closed the connection without a response")
    response = decode(line)
    if response.msg_id != message.msg_id:
        raise MalformedResponse(f"response msg_id {response.msg_id} != request {message.msg_id}")
    return response


@dataclass(frozen=True)
class Pending:
    """A message awaiting stepped delivery at virtual time ``at_ms``."""
    at_ms: int
    message: Message
    action: Any = field(default=None, compare=False)

    @property
    def order_key(self) -> tuple[int, str, int]:
        return (self.at_ms, self.message.sender, self.message.msg_id)


def stepped_deliver(pending: Iterable[Pending], clock: int) -> list[Pending]:
    """Return the items due at ``clock`` in total order (time, sender, msg_id)."""
    return sorted((p for p in pending if p.at_ms <= clock), key=lambda p: p.order_key)
