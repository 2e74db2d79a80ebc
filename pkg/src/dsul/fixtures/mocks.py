"""A tiny local HTTP target that records what hits it.

Fetch instructions in tests point at one of these instead of the open
internet. The default responder behaves like the booking service the
chatbot fixture talks to.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

Responder = Callable[[str, str, dict], tuple[int, dict]]


def booking_responder(method: str, path: str, body: dict) -> tuple[int, dict]:
    if method == "POST" and path == "/bookings":
        return 201, {"id": "bk-1", **body}
    return 404, {"error": f"no route for {method} {path}"}


class MockHttpServer:
    """Serves one responder on a loopback port; keeps a request log."""

    def __init__(self, responder: Optional[Responder] = None):
        self.responder = responder or booking_responder
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # noqa: N802 (stdlib name)
                pass

            def _serve(self, method: str) -> None:
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                try:
                    body = json.loads(raw) if raw else {}
                except ValueError:
                    body = {"raw": raw.decode("utf-8", "replace")}
                with outer._lock:
                    outer.requests.append({"method": method, "path": self.path, "body": body})
                status, data = outer.responder(method, self.path, body)
                payload = json.dumps(data).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_GET(self):  # noqa: N802
                self._serve("GET")

            def do_POST(self):  # noqa: N802
                self._serve("POST")

            def do_PUT(self):  # noqa: N802
                self._serve("PUT")

            def do_DELETE(self):  # noqa: N802
                self._serve("DELETE")

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, name="mock-http", daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "MockHttpServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
