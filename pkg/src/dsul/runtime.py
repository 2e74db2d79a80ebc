"""The running engine: loaded workspaces, event dispatch, sessions, scopes.

One RuntimeService hosts any number of workspaces over a shared broker and
scope store. External events come in through ingest(), endpoint automations
run synchronously through run_endpoint(), and channel clients follow a
session through subscribe_session(). The service itself is the Services
implementation handed to the interpreter, so emit/wait/fetch from running
automations land back here.

Dispatch model: every published custom event fans out to the automations
whose triggers name it. Runs that share a correlation id execute in order on
one worker; different correlations run in parallel on a small fixed pool.
Native runtime.* events never take that path. They are dispatched inline at
the point of emission, which gives them a useful ordering guarantee: by the
time the emitting call returns, every run they triggered has finished.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import httpx

from .broker import EventEnvelope, MemoryBroker, make_envelope, new_correlation_id
from .diagnostics import Location, warning
from .errors import (
    BrokerClosed,
    EventBudgetExhausted,
    IngestRejected,
    UnknownEndpoint,
    UnknownWorkspace,
    ValueShapeError,
    WorkspaceLoadError,
)
from .instructions import Custom, walk_instructions
from .interpreter import (
    FAIL_FETCH,
    ExecutionContext,
    HostFunctionRegistry,
    RunFailure,
    RunOutcome,
    execute_automation,
)
from .model import Workspace, is_event_name, is_reserved_event
from .parser import load_workspace_file
from .registry import Registry
from .resolve import ResolvedWorkspace, resolve_workspace
from .store import ScopeStore
from .values import Value, deep_copy, ensure_value

log = logging.getLogger(__name__)

# Custom emits allowed per correlation chain before runs start failing.
EVENT_BUDGET = 1000

# Sessions idle longer than this are flushed out of memory.
SESSION_TTL_S = 24 * 3600

# Per-session replay window for reconnecting channel clients.
SESSION_RING_SIZE = 512

FETCH_TIMEOUT_S = 10.0

NATIVE_WORKSPACE_LOADED = "runtime.workspace.loaded"
NATIVE_AUTOMATION_ADDED = "runtime.automation.added"
NATIVE_APP_INSTALLED = "runtime.app.installed"
NATIVE_RUN_FAILED = "runtime.run.failed"
NATIVE_RUN_SUCCEEDED = "runtime.run.succeeded"
NATIVE_SESSION_STARTED = "runtime.session.started"


class EventBudget:
    """Counts custom emits for one correlation chain."""

    def __init__(self, limit: int = EVENT_BUDGET):
        self.limit = limit
        self.used = 0
        self._lock = threading.Lock()

    def consume(self) -> None:
        with self._lock:
            if self.used >= self.limit:
                raise EventBudgetExhausted(
                    f"correlation chain spent its budget of {self.limit} events"
                )
            self.used += 1


class SessionState:
    """One channel session: its scope, replay ring, and live listeners."""

    def __init__(self, session_id: str, channel: Optional[str], scope: dict):
        self.id = session_id
        self.channel = channel
        self.scope = scope
        self.last_seen = time.monotonic()
        self.ring: deque[tuple[int, EventEnvelope]] = deque(maxlen=SESSION_RING_SIZE)
        self.next_seq = 1
        self.listeners: list[queue.Queue] = []
        self.lock = threading.Lock()

    def append(self, envelope: EventEnvelope) -> None:
        with self.lock:
            seq = self.next_seq
            self.next_seq += 1
            self.ring.append((seq, envelope))
            for q in self.listeners:
                q.put((seq, envelope))


@dataclass
class LoadedWorkspace:
    """A workspace the runtime is actively serving."""

    id: str
    resolved: ResolvedWorkspace
    path: Optional[Path] = None
    # exact event name -> qualified automation names, sorted
    triggers: dict = field(default_factory=dict)
    # endpoint slug (qualified automation name) -> qualified automation name
    endpoints: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    dispatch_sub: Optional[str] = None
    feed_sub: Optional[str] = None

    @property
    def workspace(self) -> Workspace:
        return self.resolved.workspace


class _DispatchLanes:
    """One serial lane per key (correlation chain). Jobs sharing a key run
    in submit order on a single thread; different keys never wait on each
    other, so a run blocked in a wait cannot starve the event that would
    wake it. Lane threads exit when their queue drains."""

    def __init__(self):
        self._lock = threading.Lock()
        self._lanes: dict[str, deque] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._closing = False

    def submit(self, key: str, job: Callable[[], None]) -> None:
        with self._lock:
            if self._closing:
                return
            lane = self._lanes.get(key)
            if lane is not None:
                lane.append(job)
                return
            self._lanes[key] = deque([job])
            t = threading.Thread(target=self._work, args=(key,), name=f"dsul-lane-{key[:24]}", daemon=True)
            self._threads[key] = t
            t.start()

    def _work(self, key: str) -> None:
        while True:
            with self._lock:
                lane = self._lanes[key]
                if not lane:
                    del self._lanes[key]
                    del self._threads[key]
                    return
                job = lane.popleft()
            try:
                job()
            except Exception:
                log.exception("dispatch job crashed")

    def drain(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        with self._lock:
            self._closing = True
            threads = list(self._threads.values())
        for t in threads:
            t.join(timeout=max(0.0, deadline - time.monotonic()))


class RuntimeService:
    """Loads workspaces and runs them. Doubles as the interpreter's
    Services implementation."""

    def __init__(
        self,
        broker=None,
        registry: Optional[Registry] = None,
        store: Optional[ScopeStore] = None,
        functions: Optional[HostFunctionRegistry] = None,
        event_budget: int = EVENT_BUDGET,
    ):
        self._own_broker = broker is None
        self.broker = broker if broker is not None else MemoryBroker()
        self.registry = registry
        self.store = store if store is not None else ScopeStore()
        self.functions = functions if functions is not None else HostFunctionRegistry()
        self.event_budget = event_budget
        self._workspaces: dict[str, LoadedWorkspace] = {}
        self._sessions: dict[tuple[str, str], SessionState] = {}
        self._budgets: dict[tuple[str, str], EventBudget] = {}
        self._global_keys: set[tuple[str, str]] = set()
        self._pool = _DispatchLanes()
        self._lock = threading.RLock()
        self._last_sweep = time.monotonic()
        self._closed = False

    # -- loading ----------------------------------------------------------

    def load_workspace(self, source: Workspace | str | Path) -> LoadedWorkspace:
        """Parse (if given a path), resolve, and start serving a workspace.
        Reloading the same slug swaps it in place and announces any
        automations that were not there before."""
        path: Optional[Path] = None
        if isinstance(source, (str, Path)):
            path = Path(source)
            result = load_workspace_file(path)
            if result.workspace is None:
                raise WorkspaceLoadError(f"cannot load {path}", result.diagnostics)
            workspace = result.workspace
        else:
            workspace = source

        resolved = resolve_workspace(workspace, self.registry)
        if not resolved.ok:
            bad = [d for d in resolved.diagnostics if d.severity == "error"]
            raise WorkspaceLoadError(
                f"workspace {workspace.slug!r} has {len(bad)} error(s)", resolved.diagnostics
            )

        lw = LoadedWorkspace(
            id=workspace.slug,
            resolved=resolved,
            path=path,
            diagnostics=list(resolved.diagnostics),
        )
        for qualified, ra in resolved.automations.items():
            for event in ra.automation.trigger.events:
                lw.triggers.setdefault(event, []).append(qualified)
            if ra.automation.trigger.endpoint:
                lw.endpoints[qualified] = qualified
        for targets in lw.triggers.values():
            targets.sort()
        self._warn_unknown_functions(lw)

        with self._lock:
            if self._closed:
                raise BrokerClosed("runtime is closed")
            previous = self._workspaces.get(lw.id)
            if previous is not None:
                self._unsubscribe(previous)
            lw.dispatch_sub = self.broker.subscribe(lw.id, "*", lambda env, lw=lw: self._on_dispatch(lw, env))
            lw.feed_sub = self.broker.subscribe(lw.id, "*", lambda env, lw=lw: self._on_feed(lw, env))
            self._workspaces[lw.id] = lw

        self._emit_native(
            lw,
            NATIVE_WORKSPACE_LOADED,
            {
                "workspaceId": lw.id,
                "automations": len(resolved.automations),
                "pages": len(resolved.pages),
                "imports": len(resolved.installs),
            },
        )
        for entry in resolved.installs:
            self._emit_native(
                lw,
                NATIVE_APP_INSTALLED,
                {
                    "workspaceId": lw.id,
                    "install": entry["install"],
                    "app": entry["app"],
                    "version": entry["version"],
                    "contentHash": entry["contentHash"],
                },
            )
        if previous is not None:
            fresh = sorted(set(resolved.automations) - set(previous.resolved.automations))
            for qualified in fresh:
                self._emit_native(
                    lw, NATIVE_AUTOMATION_ADDED, {"workspaceId": lw.id, "automation": qualified}
                )
        return lw

    def reload(self) -> list[str]:
        """Re-read every file-backed workspace. Returns the slugs reloaded."""
        with self._lock:
            paths = [(lw.id, lw.path) for lw in self._workspaces.values() if lw.path is not None]
        done = []
        for slug, path in paths:
            try:
                self.load_workspace(path)
                done.append(slug)
            except WorkspaceLoadError:
                log.exception("reload of %s from %s failed; keeping the old version", slug, path)
        return done

    def unload_workspace(self, workspace_id: str) -> None:
        with self._lock:
            lw = self._workspaces.pop(workspace_id, None)
            if lw is None:
                return
            self._unsubscribe(lw)
            dead = [k for k in self._sessions if k[0] == workspace_id]
            for key in dead:
                self.store.flush(workspace_id, "session", key[1])
                del self._sessions[key]
            gkeys = [k for k in self._global_keys if k[0] == workspace_id]
        for _, gkey in gkeys:
            self.store.flush(workspace_id, "global", gkey)

    def workspace(self, workspace_id: str) -> LoadedWorkspace:
        with self._lock:
            lw = self._workspaces.get(workspace_id)
        if lw is None:
            raise UnknownWorkspace(f"no workspace {workspace_id!r} is loaded")
        return lw

    def workspace_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._workspaces)

    def _unsubscribe(self, lw: LoadedWorkspace) -> None:
        for sub in (lw.dispatch_sub, lw.feed_sub):
            if sub is not None:
                try:
                    self.broker.unsubscribe(sub)
                except Exception:
                    pass
        lw.dispatch_sub = lw.feed_sub = None

    def _warn_unknown_functions(self, lw: LoadedWorkspace) -> None:
        known = set(self.functions.names())
        for qualified, ra in sorted(lw.resolved.automations.items()):
            for json_path, instr in walk_instructions(ra.automation.body, ""):
                if isinstance(instr, Custom) and instr.function not in known:
                    lw.diagnostics.append(
                        warning(
                            "DSUL-unknown-function",
                            f"automation {qualified!r} calls {instr.function!r} "
                            "but no such host function is registered",
                            Location(lw.id, json_path=json_path),
                        )
                    )

    # -- ingress ----------------------------------------------------------

    def ingest(
        self,
        workspace_id: str,
        event: str,
        payload: Value = None,
        *,
        session_id: Optional[str] = None,
        channel: Optional[str] = None,
        correlation_id: Optional[str] = None,
    ) -> EventEnvelope:
        """Accept one external event, fire-and-forget. Session bookkeeping
        happens before the event is published so a greeting triggered by
        runtime.session.started lands ahead of any reply to this event."""
        lw = self.workspace(workspace_id)
        if not is_event_name(event) or is_reserved_event(event):
            raise IngestRejected(f"cannot ingest {event!r}: not a custom event name")
        try:
            payload = ensure_value(payload if payload is not None else {})
        except ValueShapeError as exc:
            raise IngestRejected(f"bad payload: {exc}") from exc
        if session_id is not None:
            self._touch_session(lw, session_id, channel)
        envelope = make_envelope(
            event,
            payload,
            workspace_id=workspace_id,
            correlation_id=correlation_id or new_correlation_id(),
            channel=channel,
            session_id=session_id,
        )
        self.broker.publish(envelope)
        return envelope

    def run_endpoint(
        self,
        workspace_id: str,
        slug: str,
        payload: Value = None,
        *,
        session_id: Optional[str] = None,
        channel: Optional[str] = None,
        correlation_id: Optional[str] = None,
    ) -> tuple[RunOutcome, str]:
        """Run an endpoint automation in the calling thread and hand back
        its outcome plus the correlation id the run was tagged with."""
        lw = self.workspace(workspace_id)
        qualified = lw.endpoints.get(slug)
        if qualified is None:
            raise UnknownEndpoint(f"workspace {workspace_id!r} has no endpoint {slug!r}")
        try:
            payload = ensure_value(payload if payload is not None else {})
        except ValueShapeError as exc:
            raise IngestRejected(f"bad payload: {exc}") from exc
        arguments = payload if isinstance(payload, dict) else {"payload": payload}
        correlation = correlation_id or new_correlation_id()
        scope: dict = {}
        if session_id is not None:
            scope = self._touch_session(lw, session_id, channel)
        ra = lw.resolved.automations[qualified]
        source_event = {
            "type": "endpoint:" + slug,
            "payload": deep_copy(payload),
            "sessionId": session_id,
            "channel": channel,
            "correlationId": correlation,
        }
        ctx = ExecutionContext(
            workspace_id=lw.id,
            automation=ra,
            services=self,
            resolved=lw.resolved,
            run={"event": deep_copy(source_event)},
            arguments=arguments,
            session=scope,
            session_id=session_id,
            correlation_id=correlation,
            source_event=source_event,
        )
        outcome = execute_automation(ctx)
        self._flush_scopes(lw.id, session_id)
        self._emit_run_lifecycle(lw, outcome, qualified, correlation, session_id)
        return outcome, correlation

    # -- sessions ---------------------------------------------------------

    def _session_state(
        self, lw: LoadedWorkspace, session_id: str, channel: Optional[str]
    ) -> tuple[SessionState, bool]:
        with self._lock:
            key = (lw.id, session_id)
            state = self._sessions.get(key)
            if state is not None:
                state.last_seen = time.monotonic()
                if channel is not None:
                    state.channel = channel
                return state, False
            scope = self.store.load(lw.id, "session", session_id)
            state = SessionState(session_id, channel, scope)
            self._sessions[key] = state
            return state, True

    def _touch_session(self, lw: LoadedWorkspace, session_id: str, channel: Optional[str]) -> dict:
        state, created = self._session_state(lw, session_id, channel)
        if created:
            self._emit_native(
                lw,
                NATIVE_SESSION_STARTED,
                {"workspaceId": lw.id, "sessionId": session_id, "channel": channel},
                session_id=session_id,
                channel=channel,
            )
        self._sweep_sessions()
        return state.scope

    def subscribe_session(
        self,
        workspace_id: str,
        session_id: str,
        channel: Optional[str] = None,
        after_seq: Optional[int] = None,
    ) -> tuple[list[tuple[int, EventEnvelope]], queue.Queue, Callable[[], None]]:
        """Attach a channel client to a session. Returns the replay slice
        (everything after after_seq), a live queue of (seq, envelope), and a
        detach callback. The queue is registered before any session-start
        side effects run, so a brand new session's greeting is not lost."""
        lw = self.workspace(workspace_id)
        state, created = self._session_state(lw, session_id, channel)
        live: queue.Queue = queue.Queue()
        with state.lock:
            replay = [(seq, env) for seq, env in state.ring if after_seq is None or seq > after_seq]
            state.listeners.append(live)

        def detach() -> None:
            with state.lock:
                if live in state.listeners:
                    state.listeners.remove(live)

        if created:
            self._emit_native(
                lw,
                NATIVE_SESSION_STARTED,
                {"workspaceId": lw.id, "sessionId": session_id, "channel": channel},
                session_id=session_id,
                channel=channel,
            )
        return replay, live, detach

    def _sweep_sessions(self) -> None:
        now = time.monotonic()
        with self._lock:
            if now - self._last_sweep < 60.0:
                return
            self._last_sweep = now
            stale = [
                (key, state)
                for key, state in self._sessions.items()
                if now - state.last_seen > SESSION_TTL_S and not state.listeners
            ]
            for key, _ in stale:
                del self._sessions[key]
        for (ws, sid), _ in stale:
            self.store.flush(ws, "session", sid)

    # -- dispatch ---------------------------------------------------------

    def _on_dispatch(self, lw: LoadedWorkspace, envelope: EventEnvelope) -> None:
        # Runs on the broker's subscription worker. Natives were already
        # dispatched inline when they were emitted.
        if envelope.type.startswith("runtime."):
            return
        targets = lw.triggers.get(envelope.type)
        if not targets:
            return
        key = lw.id + "/" + envelope.source.correlation_id
        self._pool.submit(key, lambda: self._run_batch(lw, list(targets), envelope))

    def _on_feed(self, lw: LoadedWorkspace, envelope: EventEnvelope) -> None:
        # Session replay rings. Session-tagged events go to that session;
        # untagged ones are visible on every session of the workspace.
        sid = envelope.source.session_id
        with self._lock:
            if sid is not None:
                states = [s for k, s in self._sessions.items() if k == (lw.id, sid)]
            else:
                states = [s for k, s in self._sessions.items() if k[0] == lw.id]
        for state in states:
            state.append(envelope)

    def _run_batch(self, lw: LoadedWorkspace, targets: list[str], envelope: EventEnvelope) -> None:
        for qualified in targets:
            self._run_triggered(lw, qualified, envelope)

    def _run_triggered(self, lw: LoadedWorkspace, qualified: str, envelope: EventEnvelope) -> Optional[RunOutcome]:
        ra = lw.resolved.automations.get(qualified)
        if ra is None:  # the workspace was reloaded under us
            return None
        sid = envelope.source.session_id
        scope: dict = {}
        if sid is not None:
            scope = self._touch_session(lw, sid, envelope.source.channel)
        source_event = _flatten_envelope(envelope)
        ctx = ExecutionContext(
            workspace_id=lw.id,
            automation=ra,
            services=self,
            resolved=lw.resolved,
            run={"event": deep_copy(source_event)},
            arguments={},
            session=scope,
            session_id=sid,
            correlation_id=envelope.source.correlation_id,
            source_event=source_event,
        )
        outcome = execute_automation(ctx)
        self._flush_scopes(lw.id, sid)
        # Runs triggered by run lifecycle events stay silent, otherwise
        # every failure handler would announce a run of its own forever.
        if not envelope.type.startswith("runtime.run."):
            self._emit_run_lifecycle(lw, outcome, qualified, envelope.source.correlation_id, sid)
        return outcome

    def _emit_run_lifecycle(
        self,
        lw: LoadedWorkspace,
        outcome: RunOutcome,
        qualified: str,
        correlation_id: str,
        session_id: Optional[str],
    ) -> None:
        payload = {
            "workspaceId": lw.id,
            "automation": qualified,
            "correlationId": correlation_id,
            "durationMs": round(outcome.duration_ms, 3),
            "warnings": list(outcome.warnings),
        }
        if session_id is not None:
            payload["sessionId"] = session_id
        if outcome.ok:
            self._emit_native(lw, NATIVE_RUN_SUCCEEDED, payload,
                              correlation_id=correlation_id, session_id=session_id)
        else:
            payload["failure"] = dict(outcome.failure or {})
            self._emit_native(lw, NATIVE_RUN_FAILED, payload,
                              correlation_id=correlation_id, session_id=session_id)

    def _emit_native(
        self,
        lw: LoadedWorkspace,
        event_type: str,
        payload: dict,
        *,
        correlation_id: Optional[str] = None,
        session_id: Optional[str] = None,
        channel: Optional[str] = None,
    ) -> EventEnvelope:
        envelope = make_envelope(
            event_type,
            payload,
            workspace_id=lw.id,
            correlation_id=correlation_id or new_correlation_id(),
            channel=channel,
            session_id=session_id,
        )
        try:
            self.broker.publish(envelope)
        except BrokerClosed:
            return envelope
        # Inline dispatch: native-triggered runs complete before we return.
        for qualified in lw.triggers.get(event_type, []):
            self._run_triggered(lw, qualified, envelope)
        return envelope

    def _flush_scopes(self, workspace_id: str, session_id: Optional[str]) -> None:
        if session_id is not None:
            self.store.flush(workspace_id, "session", session_id)
        with self._lock:
            keys = [k for k in self._global_keys if k[0] == workspace_id]
        for ws, key in keys:
            self.store.flush(ws, "global", key)

    def _budget(self, workspace_id: str, correlation_id: str) -> EventBudget:
        with self._lock:
            key = (workspace_id, correlation_id)
            budget = self._budgets.get(key)
            if budget is None:
                budget = EventBudget(self.event_budget)
                self._budgets[key] = budget
                # correlation chains are short-lived; cap the bookkeeping
                while len(self._budgets) > 10_000:
                    self._budgets.pop(next(iter(self._budgets)))
            return budget

    # -- Services (what running automations see) --------------------------

    def emit(self, ctx: ExecutionContext, event: str, payload: Value) -> None:
        self._budget(ctx.workspace_id, ctx.correlation_id).consume()
        envelope = make_envelope(
            event,
            payload,
            workspace_id=ctx.workspace_id,
            correlation_id=ctx.correlation_id,
            automation=ctx.automation.qualified,
            session_id=ctx.session_id,
        )
        self.broker.publish(envelope)

    def wait(self, ctx: ExecutionContext, event: str, timeout_ms: int) -> tuple[bool, Value]:
        got: queue.Queue = queue.Queue()

        def on_event(env: EventEnvelope) -> None:
            if ctx.session_id is not None and env.source.session_id != ctx.session_id:
                return
            got.put(env)

        sub = self.broker.subscribe(ctx.workspace_id, event, on_event)
        try:
            if timeout_ms <= 0:
                envelope = got.get_nowait()
            else:
                envelope = got.get(timeout=timeout_ms / 1000.0)
        except queue.Empty:
            return False, None
        finally:
            try:
                self.broker.unsubscribe(sub)
            except Exception:
                pass
        return True, deep_copy(envelope.payload)

    def fetch(self, ctx: ExecutionContext, url: str, method: str, headers: dict, body: Value) -> Value:
        kwargs: dict = {"headers": headers or None}
        if isinstance(body, str):
            kwargs["content"] = body.encode("utf-8")
        elif body is not None:
            kwargs["json"] = body
        try:
            response = httpx.request(
                method, url, timeout=FETCH_TIMEOUT_S, follow_redirects=True, **kwargs
            )
        except (httpx.HTTPError, OSError) as exc:
            raise RunFailure(FAIL_FETCH, f"{method} {url}: {exc}") from exc
        content_type = response.headers.get("content-type", "")
        if "json" in content_type:
            try:
                parsed: Value = response.json()
            except ValueError:
                parsed = response.text
        else:
            parsed = response.text
        result = {
            "status": response.status_code,
            "headers": {k.lower(): v for k, v in response.headers.items()},
            "body": parsed,
        }
        try:
            return ensure_value(result)
        except ValueShapeError as exc:
            raise RunFailure(FAIL_FETCH, f"{method} {url}: unusable response: {exc}") from exc

    def globals_for(self, workspace_id: str, install_path: tuple[str, ...]) -> dict:
        key = ".".join(install_path) if install_path else "root"
        with self._lock:
            self._global_keys.add((workspace_id, key))
        return self.store.load(workspace_id, "global", key)

    # -- shutdown ---------------------------------------------------------

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            workspaces = list(self._workspaces.values())
        for lw in workspaces:
            self._unsubscribe(lw)
        self._pool.drain()
        with self._lock:
            sessions = list(self._sessions.items())
            globals_ = list(self._global_keys)
        for (ws, sid), _ in sessions:
            self.store.flush(ws, "session", sid)
        for ws, key in globals_:
            self.store.flush(ws, "global", key)
        if self._own_broker:
            self.broker.close()


def _flatten_envelope(envelope: EventEnvelope) -> dict:
    """The shape a run sees as run.event: the envelope with its source
    fields pulled up one level."""
    return {
        "id": envelope.id,
        "type": envelope.type,
        "payload": deep_copy(envelope.payload),
        "createdAt": envelope.created_at,
        "correlationId": envelope.source.correlation_id,
        "sessionId": envelope.source.session_id,
        "channel": envelope.source.channel,
        "automation": envelope.source.automation,
    }
