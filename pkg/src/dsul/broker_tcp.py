"""Loopback TCP broker backend: same contract as MemoryBroker, real wire.

Frames are a 4-byte big-endian length followed by UTF-8 JSON. A client
connection either publishes ({op: publish, envelope}) or subscribes
({op: subscribe, workspaceId, pattern}, acked with {op: subscribed});
after the ack the server pushes matching envelopes down that connection,
and the client's reader thread is the subscription's FIFO worker. Several
TcpBroker clients may attach to one server, which is how events cross
process boundaries without changing any engine code.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import threading
import uuid
from typing import Optional

from .broker import EventEnvelope, Handler, envelope_from_data, topic_matches
from .errors import BrokerClosed, UnknownSubscription

log = logging.getLogger("dsul.broker.tcp")

MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


def send_frame(sock: socket.socket, data: dict) -> None:
    body = json.dumps(data, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise ValueError(f"frame of {len(body)} bytes exceeds the {MAX_FRAME} cap")
    sock.sendall(_LEN.pack(len(body)) + body)


def recv_frame(sock: socket.socket) -> Optional[dict]:
    header = _recv_exact(sock, _LEN.size)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise ValueError(f"peer announced a {length} byte frame")
    body = _recv_exact(sock, length)
    if body is None:
        return None
    return json.loads(body.decode("utf-8"))


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(remaining)
        except OSError:
            return None
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class TcpBrokerServer:
    """Accepts connections on 127.0.0.1 and routes publish frames to the
    matching subscriber connections, in arrival order."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._lock = threading.Lock()
        self._subscribers: dict[socket.socket, tuple[str, str, threading.Lock]] = {}
        self._conns: set[socket.socket] = set()
        self._threads: list[threading.Thread] = []
        self._closed = False
        self._accept_thread = threading.Thread(target=self._accept, name="tcp-broker-accept", daemon=True)
        self._accept_thread.start()

    def _accept(self) -> None:
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            thread = threading.Thread(target=self._serve, args=(conn,), name="tcp-broker-conn", daemon=True)
            with self._lock:
                if self._closed:
                    conn.close()
                    return
                self._conns.add(conn)
                self._threads.append(thread)
            thread.start()

    def _serve(self, conn: socket.socket) -> None:
        try:
            while True:
                try:
                    frame = recv_frame(conn)
                except (ValueError, json.JSONDecodeError):
                    log.warning("dropping connection after a bad frame")
                    break
                if frame is None:
                    break
                op = frame.get("op")
                if op == "subscribe":
                    with self._lock:
                        self._subscribers[conn] = (
                            str(frame.get("workspaceId", "")),
                            str(frame.get("pattern", "*")),
                            threading.Lock(),
                        )
                    send_frame(conn, {"op": "subscribed"})
                elif op == "publish":
                    self._route(frame.get("envelope"))
                else:
                    log.warning("unknown op %r", op)
        finally:
            with self._lock:
                self._subscribers.pop(conn, None)
                self._conns.discard(conn)
            conn.close()

    def _route(self, data) -> None:
        if not isinstance(data, dict):
            return
        try:
            workspace = data["source"]["workspaceId"]
            event = data["type"]
        except (KeyError, TypeError):
            return
        with self._lock:
            targets = [
                (conn, wlock)
                for conn, (ws, pattern, wlock) in self._subscribers.items()
                if ws == workspace and topic_matches(pattern, event)
            ]
        for conn, wlock in targets:
            try:
                with wlock:
                    send_frame(conn, {"op": "event", "envelope": data})
            except OSError:
                with self._lock:
                    self._subscribers.pop(conn, None)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            conns = list(self._conns)
            self._conns.clear()
            self._subscribers.clear()
            threads = list(self._threads)
        # Closing a listener does not wake a blocked accept(); dial in once
        # so the accept loop runs, sees the closed flag, and exits.
        try:
            socket.create_connection(self.address, timeout=1.0).close()
        except OSError:
            pass
        self._listener.close()
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._accept_thread.join(timeout=5.0)
        for thread in threads:
            thread.join(timeout=5.0)


class _TcpSubscription:
    def __init__(self, sub_id: str, sock: socket.socket, handler: Handler):
        self.id = sub_id
        self.sock = sock
        self.handler = handler
        self.thread = threading.Thread(target=self._drain, name=f"tcp-sub-{sub_id[:8]}", daemon=True)
        self.thread.start()

    def _drain(self) -> None:
        while True:
            try:
                frame = recv_frame(self.sock)
            except (ValueError, json.JSONDecodeError):
                log.exception("subscription %s got a bad frame", self.id)
                return
            if frame is None:
                return
            if frame.get("op") != "event":
                continue
            try:
                self.handler(envelope_from_data(frame["envelope"]))
            except Exception:
                log.exception("handler for subscription %s failed", self.id)

    def stop(self) -> None:
        # shutdown, not just close: close() alone leaves a reader blocked in
        # recv holding the socket open, and neither side ever sees the FIN.
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def join(self, timeout: float) -> None:
        self.thread.join(timeout)


class TcpBroker:
    """Broker client over the loopback server. With no address given it
    runs its own embedded server and tears it down on close."""

    def __init__(self, address: Optional[tuple[str, int]] = None):
        self._server: Optional[TcpBrokerServer] = None
        if address is None:
            self._server = TcpBrokerServer()
            address = self._server.address
        self.address = address
        self._lock = threading.Lock()
        self._publisher: Optional[socket.socket] = None
        self._subs: dict[str, _TcpSubscription] = {}
        self._closed = False

    def publish(self, envelope: EventEnvelope) -> None:
        with self._lock:
            if self._closed:
                raise BrokerClosed("publish on a closed broker")
            if self._publisher is None:
                self._publisher = socket.create_connection(self.address)
            sock = self._publisher
            try:
                send_frame(sock, {"op": "publish", "envelope": envelope.to_data()})
            except OSError as exc:
                raise BrokerClosed(f"broker connection lost: {exc}") from exc

    def subscribe(self, workspace_id: str, pattern: str, handler: Handler) -> str:
        with self._lock:
            if self._closed:
                raise BrokerClosed("subscribe on a closed broker")
        sock = socket.create_connection(self.address)
        send_frame(sock, {"op": "subscribe", "workspaceId": workspace_id, "pattern": pattern})
        ack = recv_frame(sock)
        if not ack or ack.get("op") != "subscribed":
            sock.close()
            raise BrokerClosed("server did not acknowledge the subscription")
        sub = _TcpSubscription(uuid.uuid4().hex, sock, handler)
        with self._lock:
            if self._closed:
                sub.stop()
                raise BrokerClosed("subscribe on a closed broker")
            self._subs[sub.id] = sub
        return sub.id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            sub = self._subs.pop(sub_id, None)
        if sub is None:
            raise UnknownSubscription(f"no subscription {sub_id!r}")
        sub.stop()
        sub.join(timeout=5.0)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            publisher = self._publisher
            self._publisher = None
            subs = list(self._subs.values())
            self._subs.clear()
        if publisher is not None:
            # Half-close so the server drains everything already sent.
            try:
                publisher.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            publisher.close()
        for sub in subs:
            sub.stop()
        for sub in subs:
            sub.join(timeout=5.0)
        if self._server is not None:
            self._server.close()
