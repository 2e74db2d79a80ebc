"""Event envelopes and the in-memory message broker.

Delivery contract, shared by every backend: at-least-once, and for one
subscriber the envelopes of one publisher arrive in publish order (each
subscription drains its own FIFO on its own worker thread). Patterns are
exact event names or a trailing ``*`` that covers every deeper segment;
``*`` alone matches everything. Routing never crosses workspaces.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import queue
import threading
import uuid
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import BrokerClosed, UnknownSubscription
from .values import Value, compact_json, ensure_value

log = logging.getLogger("dsul.broker")


@dataclass(frozen=True)
class EventSource:
    workspace_id: str
    correlation_id: str
    automation: Optional[str] = None
    channel: Optional[str] = None
    session_id: Optional[str] = None


@dataclass(frozen=True)
class EventEnvelope:
    id: str
    type: str
    source: EventSource
    payload: Value
    created_at: str

    def to_data(self) -> dict:
        source: dict = {
            "workspaceId": self.source.workspace_id,
            "correlationId": self.source.correlation_id,
        }
        if self.source.automation is not None:
            source["automationSlug"] = self.source.automation
        if self.source.channel is not None:
            source["channel"] = self.source.channel
        if self.source.session_id is not None:
            source["sessionId"] = self.source.session_id
        return {
            "id": self.id,
            "type": self.type,
            "source": source,
            "payload": self.payload,
            "createdAt": self.created_at,
        }

    def to_json(self) -> str:
        """Canonical wire form: compact JSON with sorted keys."""
        return compact_json(self.to_data())


def envelope_from_data(data: dict) -> EventEnvelope:
    source = data["source"]
    return EventEnvelope(
        id=data["id"],
        type=data["type"],
        source=EventSource(
            workspace_id=source["workspaceId"],
            correlation_id=source["correlationId"],
            automation=source.get("automationSlug"),
            channel=source.get("channel"),
            session_id=source.get("sessionId"),
        ),
        payload=data.get("payload"),
        created_at=data["createdAt"],
    )


def envelope_from_json(text: str) -> EventEnvelope:
    return envelope_from_data(json.loads(text))


def make_envelope(
    event_type: str,
    payload: Value,
    workspace_id: str,
    correlation_id: str,
    automation: Optional[str] = None,
    channel: Optional[str] = None,
    session_id: Optional[str] = None,
) -> EventEnvelope:
    return EventEnvelope(
        id=uuid.uuid4().hex,
        type=event_type,
        source=EventSource(
            workspace_id=workspace_id,
            correlation_id=correlation_id,
            automation=automation,
            channel=channel,
            session_id=session_id,
        ),
        payload=ensure_value(payload),
        created_at=_now_ms(),
    )


def new_correlation_id() -> str:
    return uuid.uuid4().hex


def _now_ms() -> str:
    now = _dt.datetime.now(_dt.timezone.utc)
    return now.strftime("%Y-%m-%dT%H:%M:%S.") + f"{now.microsecond // 1000:03d}Z"


def topic_matches(pattern: str, event: str) -> bool:
    if pattern == "*":
        return True
    if pattern.endswith(".*"):
        return event.startswith(pattern[:-1])  # keeps the dot
    return pattern == event


Handler = Callable[[EventEnvelope], None]


class _Subscription:
    def __init__(self, sub_id: str, workspace_id: str, pattern: str, handler: Handler):
        self.id = sub_id
        self.workspace_id = workspace_id
        self.pattern = pattern
        self.handler = handler
        self.fifo: queue.Queue = queue.Queue()
        self.thread = threading.Thread(target=self._drain, name=f"broker-sub-{sub_id[:8]}", daemon=True)
        self.thread.start()

    def _drain(self) -> None:
        while True:
            envelope = self.fifo.get()
            if envelope is None:
                return
            try:
                self.handler(envelope)
            except Exception:
                # A broken handler must not take the subscription down.
                log.exception("handler for %s failed on %s", self.pattern, envelope.type)

    def stop(self) -> None:
        self.fifo.put(None)

    def join(self, timeout: float) -> None:
        self.thread.join(timeout)


class MemoryBroker:
    """Process-local broker backend."""

    def __init__(self):
        self._subs: dict[str, _Subscription] = {}
        self._lock = threading.Lock()
        self._closed = False

    def publish(self, envelope: EventEnvelope) -> None:
        with self._lock:
            if self._closed:
                raise BrokerClosed("publish on a closed broker")
            targets = [
                sub
                for sub in self._subs.values()
                if sub.workspace_id == envelope.source.workspace_id and topic_matches(sub.pattern, envelope.type)
            ]
        for sub in targets:
            sub.fifo.put(envelope)

    def subscribe(self, workspace_id: str, pattern: str, handler: Handler) -> str:
        with self._lock:
            if self._closed:
                raise BrokerClosed("subscribe on a closed broker")
            sub = _Subscription(uuid.uuid4().hex, workspace_id, pattern, handler)
            self._subs[sub.id] = sub
            return sub.id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            sub = self._subs.pop(sub_id, None)
        if sub is None:
            raise UnknownSubscription(f"no subscription {sub_id!r}")
        sub.stop()

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            subs = list(self._subs.values())
            self._subs.clear()
        for sub in subs:
            sub.stop()
        for sub in subs:
            sub.join(timeout=5.0)
