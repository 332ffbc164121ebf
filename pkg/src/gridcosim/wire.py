"""Length-prefixed TCP transport for the message bus.

Each frame is a 4-byte big-endian length followed by a UTF-8 JSON object.
Envelopes travel as ``{topic, tick, publisher_id, schema, values}``; control
frames carry an ``op`` key (``hello``, ``subscribe``, ``unsubscribe``,
``publish``, ``ack``).
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Any

from .msgbus import (
    Broker,
    BusError,
    DeliveryReport,
    Envelope,
    Mailbox,
    NotFoundError,
    Subscription,
    UnavailableError,
    ValidationError,
)

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024

_ERRORS = {"validation": ValidationError, "not_found": NotFoundError,
           "unavailable": UnavailableError}


def encode_frame(obj: dict[str, Any]) -> bytes:
    body = json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _HEADER.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> dict[str, Any] | None:
    """Read one frame; ``None`` on clean EOF."""
    header = _recv_exact(sock, _HEADER.size)
    if header is None:
        return None
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME:
        raise ValidationError(f"frame of {length} bytes exceeds limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise ConnectionError("connection closed mid-frame")
    return json.loads(body.decode("utf-8"))


def _error_kind(exc: Exception) -> str:
    for kind, cls in _ERRORS.items():
        if isinstance(exc, cls):
            return kind
    return "error"


class _SocketMailbox:
    """Server-side delivery target that writes envelopes to a client socket."""

    def __init__(self, sock: socket.socket, lock: threading.Lock) -> None:
        self.sock = sock
        self.lock = lock

    def put(self, envelope: Envelope) -> None:
        frame = encode_frame(envelope.to_wire())
        with self.lock:
            try:
                self.sock.sendall(frame)
            except OSError:
                log.debug("dropping delivery to closed socket")

    def close(self) -> None:
        pass


class _Handler(socketserver.BaseRequestHandler):
    server: "BusServer"

    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        write_lock = threading.Lock()
        broker = self.server.broker
        client_id = None
        try:
            while True:
                msg = read_frame(sock)
                if msg is None:
                    break
                op = msg.get("op")
                reply: dict[str, Any] = {"op": "ack", "seq": msg.get("seq")}
                try:
                    if op == "hello":
                        client_id = str(msg["client_id"])
                        broker.attach(client_id, _SocketMailbox(sock, write_lock))
                    elif client_id is None:
                        raise ValidationError("hello required before other operations")
                    elif op == "subscribe":
                        broker.subscribe(client_id, msg["filter"])
                    elif op == "unsubscribe":
                        broker.unsubscribe(Subscription(client_id, msg["filter"]))
                    elif op == "publish":
                        env = Envelope.from_wire(msg["envelope"])
                        if env.publisher_id != client_id:
                            raise ValidationError("publisher_id must match the connection's client id")
                        reply["count"] = broker.publish(env).count
                    else:
                        raise ValidationError(f"unknown op {op!r}")
                except (BusError, KeyError) as exc:
                    reply["error"] = _error_kind(exc)
                    reply["message"] = str(exc)
                frame = encode_frame(reply)
                with write_lock:
                    sock.sendall(frame)
        except (ConnectionError, OSError, ValueError) as exc:
            log.debug("connection %s closed: %s", client_id, exc)
        finally:
            if client_id is not None:
                broker.disconnect(client_id)


class BusServer(socketserver.ThreadingTCPServer):
    """Exposes a :class:`Broker` over TCP; one handler thread per client."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, broker: Broker | None = None, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.broker = broker or Broker()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def start(self) -> "BusServer":
        self._thread = threading.Thread(target=self.serve_forever, name="bus-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.broker.shutdown()
        self.server_close()


class RemoteClient:
    """Client handle with the same surface as :class:`msgbus.LocalClient`."""

    def __init__(self, host: str, port: int, client_id: str, timeout: float = 30.0) -> None:
        self.client_id = client_id
        self.timeout = timeout
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)
        self._box = Mailbox()
        self._acks: dict[int, dict[str, Any]] = {}
        self._ack_cond = threading.Condition()
        self._send_lock = threading.Lock()
        self._seq = 0
        self._reader = threading.Thread(target=self._read_loop, name=f"wire-{client_id}", daemon=True)
        self._reader.start()
        self._request({"op": "hello", "client_id": client_id})

    def _read_loop(self) -> None:
        try:
            while True:
                msg = read_frame(self._sock)
                if msg is None:
                    break
                if "op" in msg:
                    with self._ack_cond:
                        self._acks[msg["seq"]] = msg
                        self._ack_cond.notify_all()
                else:
                    self._box.put(Envelope.from_wire(msg))
        except (OSError, ValueError):
            pass
        finally:
            self._box.close()
            with self._ack_cond:
                self._ack_cond.notify_all()

    def _request(self, msg: dict[str, Any]) -> dict[str, Any]:
        with self._send_lock:
            self._seq += 1
            seq = msg["seq"] = self._seq
            try:
                self._sock.sendall(encode_frame(msg))
            except OSError as exc:
                raise UnavailableError(f"bus connection lost: {exc}") from None
        with self._ack_cond:
            ok = self._ack_cond.wait_for(
                lambda: seq in self._acks or not self._reader.is_alive(), self.timeout)
            reply = self._acks.pop(seq, None)
        if not ok or reply is None:
            raise UnavailableError("no reply from bus server")
        if "error" in reply:
            raise _ERRORS.get(reply["error"], BusError)(reply.get("message", ""))
        return reply

    def subscribe(self, filter: str) -> Subscription:
        self._request({"op": "subscribe", "filter": filter})
        return Subscription(self.client_id, filter)

    def unsubscribe(self, subscription: Subscription) -> None:
        self._request({"op": "unsubscribe", "filter": subscription.filter})

    def publish(self, topic: str, tick: int, /, **values: Any) -> DeliveryReport:
        return self.publish_envelope(Envelope.create(topic, tick, self.client_id, **values))

    def publish_envelope(self, envelope: Envelope) -> DeliveryReport:
        reply = self._request({"op": "publish", "envelope": envelope.to_wire()})
        return DeliveryReport(int(reply["count"]))

    def get(self, timeout: float | None = None) -> Envelope | None:
        return self._box.get(timeout)

    def drain(self) -> list[Envelope]:
        return self._box.drain()

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
