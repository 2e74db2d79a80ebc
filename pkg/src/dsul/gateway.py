"""HTTP face of the runtime.

Everything a channel client needs sits under /v1/workspaces/{id}:

    POST /events                     accept one external event, 202
    GET  /sessions/{sid}/events      server-sent event stream for a session
    POST /endpoints/{slug}           run an endpoint automation, wait for it
    GET  /pages                      list pages
    GET  /pages/{slug}               one page with its blocks
    GET  /graph                      the workspace as a service graph

plus GET /healthz at the root. JSON in, JSON out, except the SSE stream.
The session id rides in the X-Session-Id header (or the body for POSTs);
the channel name in X-Channel. SSE replay uses the standard Last-Event-ID
header, with ?after= as a query fallback for clients that cannot set it.
"""

from __future__ import annotations

import json
import logging
import queue
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .errors import (
    IngestRejected,
    PortInUse,
    UnknownEndpoint,
    UnknownPage,
    UnknownWorkspace,
)
from .graph import service_graph_data
from .runtime import RuntimeService
from .values import compact_json

log = logging.getLogger(__name__)

MAX_BODY = 1 << 20
SSE_HEARTBEAT_S = 15.0

_ROUTES = [
    ("GET", re.compile(r"^/healthz$"), "health"),
    ("POST", re.compile(r"^/v1/workspaces/([^/]+)/events$"), "ingest"),
    ("GET", re.compile(r"^/v1/workspaces/([^/]+)/sessions/([^/]+)/events$"), "stream"),
    ("POST", re.compile(r"^/v1/workspaces/([^/]+)/endpoints/([^/]+)$"), "endpoint"),
    ("GET", re.compile(r"^/v1/workspaces/([^/]+)/pages$"), "pages"),
    ("GET", re.compile(r"^/v1/workspaces/([^/]+)/pages/([^/]+)$"), "page"),
    ("GET", re.compile(r"^/v1/workspaces/([^/]+)/graph$"), "graph"),
]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "_Server"

    # -- plumbing ---------------------------------------------------------

    def log_message(self, fmt, *args):  # noqa: N802 (stdlib name)
        log.debug("%s %s", self.address_string(), fmt % args)

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")

    def _json(self, status: int, data) -> None:
        body = (compact_json(data) + "\n").encode("utf-8")
        self.send_response(status)
        self._cors()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._json(status, {"error": message})

    def _read_body(self) -> Optional[dict]:
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self._error(413, "body too large")
            return None
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            data = json.loads(raw)
        except ValueError:
            self._error(400, "body is not valid JSON")
            return None
        if not isinstance(data, dict):
            self._error(400, "body must be a JSON object")
            return None
        return data

    def _dispatch(self, method: str) -> None:
        for verb, pattern, name in _ROUTES:
            match = pattern.match(self.path.split("?", 1)[0])
            if match and verb == method:
                try:
                    getattr(self, "do_" + name)(*match.groups())
                except UnknownWorkspace as exc:
                    self._error(404, str(exc))
                except (UnknownEndpoint, UnknownPage) as exc:
                    self._error(404, str(exc))
                except IngestRejected as exc:
                    self._error(400, str(exc))
                except (BrokenPipeError, ConnectionResetError):
                    pass
                except Exception:
                    log.exception("%s %s failed", method, self.path)
                    try:
                        self._error(500, "internal error")
                    except Exception:
                        pass
                return
            if match:
                self._error(405, f"{method} not allowed here")
                return
        self._error(404, "no such route")

    def do_GET(self):  # noqa: N802
        self._dispatch("GET")

    def do_POST(self):  # noqa: N802
        self._dispatch("POST")

    def do_OPTIONS(self):  # noqa: N802
        self.send_response(204)
        self._cors()
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header(
            "Access-Control-Allow-Headers",
            "Content-Type, X-Session-Id, X-Channel, Last-Event-ID",
        )
        self.send_header("Access-Control-Max-Age", "86400")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _query(self) -> dict:
        if "?" not in self.path:
            return {}
        out = {}
        for pair in self.path.split("?", 1)[1].split("&"):
            if "=" in pair:
                k, v = pair.split("=", 1)
                out[k] = v
        return out

    @property
    def runtime(self) -> RuntimeService:
        return self.server.runtime

    # -- routes -----------------------------------------------------------

    def do_health(self) -> None:
        self._json(200, {"status": "ok", "workspaces": self.runtime.workspace_ids()})

    def do_ingest(self, workspace_id: str) -> None:
        body = self._read_body()
        if body is None:
            return
        event = body.get("event")
        if not isinstance(event, str):
            self._error(400, "missing 'event'")
            return
        session_id = self.headers.get("X-Session-Id") or body.get("sessionId")
        channel = self.headers.get("X-Channel") or body.get("channel")
        envelope = self.runtime.ingest(
            workspace_id,
            event,
            body.get("payload"),
            session_id=session_id,
            channel=channel,
            correlation_id=body.get("correlationId"),
        )
        self._json(
            202, {"eventId": envelope.id, "correlationId": envelope.source.correlation_id}
        )

    def do_endpoint(self, workspace_id: str, slug: str) -> None:
        body = self._read_body()
        if body is None:
            return
        body_session = body.pop("sessionId", None)
        body_channel = body.pop("channel", None)
        session_id = self.headers.get("X-Session-Id") or body_session
        channel = self.headers.get("X-Channel") or body_channel
        outcome, correlation = self.runtime.run_endpoint(
            workspace_id, slug, body, session_id=session_id, channel=channel
        )
        data = {
            "automation": outcome.automation,
            "status": outcome.status,
            "output": outcome.output,
            "correlationId": correlation,
            "durationMs": round(outcome.duration_ms, 3),
            "warnings": list(outcome.warnings),
        }
        if outcome.failure is not None:
            data["failure"] = outcome.failure
        self._json(200 if outcome.ok else 422, data)

    def do_pages(self, workspace_id: str) -> None:
        lw = self.runtime.workspace(workspace_id)
        pages = [
            {"slug": rp.qualified, "name": rp.page.name, "blocks": len(rp.page.blocks)}
            for rp in sorted(lw.resolved.pages, key=lambda rp: rp.qualified)
        ]
        self._json(200, {"workspaceId": workspace_id, "pages": pages})

    def do_page(self, workspace_id: str, slug: str) -> None:
        lw = self.runtime.workspace(workspace_id)
        rp = next((p for p in lw.resolved.pages if p.qualified == slug), None)
        if rp is None:
            raise UnknownPage(f"workspace {workspace_id!r} has no page {slug!r}")
        page = rp.page
        self._json(
            200,
            {
                "workspaceId": workspace_id,
                "slug": rp.qualified,
                "name": page.name,
                "description": page.description,
                "blocks": [
                    {"kind": b.kind, "config": b.config, "onEvent": b.on_event}
                    for b in page.blocks
                ],
            },
        )

    def do_graph(self, workspace_id: str) -> None:
        lw = self.runtime.workspace(workspace_id)
        self._json(200, service_graph_data(lw.workspace, lw.resolved))

    def do_stream(self, workspace_id: str, session_id: str) -> None:
        query = self._query()
        channel = self.headers.get("X-Channel") or query.get("channel")
        after: Optional[int] = None
        last_id = self.headers.get("Last-Event-ID") or query.get("after")
        if last_id is not None:
            try:
                after = int(last_id)
            except ValueError:
                self._error(400, "Last-Event-ID must be an integer")
                return
        replay, live, detach = self.runtime.subscribe_session(
            workspace_id, session_id, channel=channel, after_seq=after
        )
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        try:
            for seq, envelope in replay:
                self._sse_frame(seq, envelope)
            while not self.server.closing:
                try:
                    seq, envelope = live.get(timeout=SSE_HEARTBEAT_S)
                except queue.Empty:
                    self.wfile.write(b": ping\n\n")
                    self.wfile.flush()
                    continue
                self._sse_frame(seq, envelope)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            detach()

    def _sse_frame(self, seq: int, envelope) -> None:
        data = compact_json(envelope.to_data())
        self.wfile.write(f"id: {seq}\ndata: {data}\n\n".encode("utf-8"))
        self.wfile.flush()


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, runtime: RuntimeService):
        self.runtime = runtime
        self.closing = False
        super().__init__(address, _Handler)


class Gateway:
    """The HTTP server, running on its own threads."""

    def __init__(self, runtime: RuntimeService, host: str = "127.0.0.1", port: int = 8400):
        try:
            self._server = _Server((host, port), runtime)
        except OSError as exc:
            raise PortInUse(f"cannot bind {host}:{port}: {exc}") from exc
        self._thread = threading.Thread(target=self._server.serve_forever, name="dsul-gateway", daemon=True)
        self._thread.start()

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def close(self) -> None:
        self._server.closing = True
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=10.0)
