"""HTTP gateway: routes, error mapping, CORS, and the session event stream.

Each test class gets one Gateway on an ephemeral port and drives it with
a real HTTP client; nothing here reaches into handler internals.
"""

import json
import threading
import time

import httpx
import pytest

from dsul.broker import MemoryBroker
from dsul.errors import PortInUse
from dsul.fixtures import publish_document_suite
from dsul.gateway import Gateway
from dsul.registry import Registry
from dsul.runtime import RuntimeService

from conftest import parse_ok

ROOMS_WS = """\
slug: rooms
automations:
  - slug: count
    trigger: {events: ["msg.in"]}
    do:
      - set: {name: session.n, value: "{{ session.n }}x"}
      - emit:
          event: msg.out
          payload: {n: {var: session.n}}
  - slug: greet-api
    trigger: {endpoint: true}
    arguments:
      who: {type: string, required: true}
    do:
      - set: {name: session.calls, value: "{{ session.calls }}x"}
    output:
      hello: {var: arguments.who}
      calls: {var: session.calls}
"""


@pytest.fixture(scope="class")
def served(request, tmp_path_factory):
    registry = Registry(tmp_path_factory.mktemp("registry"))
    portal = publish_document_suite(registry)
    svc = RuntimeService(broker=MemoryBroker(), registry=registry)
    svc.load_workspace(parse_ok(ROOMS_WS))
    svc.load_workspace(portal)
    gw = Gateway(svc, port=0)
    client = httpx.Client(base_url=gw.url, timeout=5.0)
    request.cls.svc = svc
    request.cls.gw = gw
    request.cls.client = client
    yield
    client.close()
    gw.close()
    svc.close()


def sse_frames(response, stop, budget=5.0):
    """Read id/data frames off a live SSE response until stop(frames)."""
    frames = []
    current = {}
    deadline = time.monotonic() + budget
    for line in response.iter_lines():
        if line.startswith("id: "):
            current["id"] = int(line[4:])
        elif line.startswith("data: "):
            current["data"] = json.loads(line[6:])
        elif line == "":
            if current:
                frames.append(current)
                current = {}
            if stop(frames):
                return frames
        if time.monotonic() > deadline:
            raise AssertionError(f"stream never settled; got {frames}")
    raise AssertionError("stream ended early")


@pytest.mark.usefixtures("served")
class TestRoutes:
    def test_healthz_lists_the_workspaces(self):
        resp = self.client.get("/healthz")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "workspaces": ["doc-portal", "rooms"]}
        assert resp.headers["access-control-allow-origin"] == "*"
        assert resp.text.endswith("\n")

    def test_ingest_accepts_and_tags(self):
        resp = self.client.post(
            "/v1/workspaces/rooms/events",
            json={"event": "msg.in", "payload": {"note": 1}, "correlationId": "corr-http"},
        )
        assert resp.status_code == 202
        data = resp.json()
        assert data["correlationId"] == "corr-http"
        assert len(data["eventId"]) == 32

    def test_ingest_rejections_map_to_400(self):
        bad = [
            {"payload": {}},  # no event
            {"event": "runtime.workspace.loaded"},  # reserved
            {"event": "Not an Event"},
        ]
        for body in bad:
            resp = self.client.post("/v1/workspaces/rooms/events", json=body)
            assert resp.status_code == 400, body
            assert "error" in resp.json()

    def test_malformed_bodies_are_400(self):
        resp = self.client.post(
            "/v1/workspaces/rooms/events",
            content=b"{not json",
            headers={"Content-Type": "application/json"},
        )
        assert resp.status_code == 400
        resp = self.client.post(
            "/v1/workspaces/rooms/events",
            content=b'["a", "list"]',
            headers={"Content-Type": "application/json"},
        )
        assert resp.status_code == 400

    def test_unknown_workspace_is_404(self):
        resp = self.client.post("/v1/workspaces/ghost/events", json={"event": "x.y"})
        assert resp.status_code == 404

    def test_wrong_method_is_405_and_unknown_route_404(self):
        assert self.client.get("/v1/workspaces/rooms/events").status_code == 405
        assert self.client.post("/v1/workspaces/rooms/pages").status_code == 405
        assert self.client.get("/v1/nothing/here").status_code == 404

    def test_oversized_body_is_413(self):
        # raw socket: the refusal must come from the header alone, before
        # any of the announced body is sent
        import socket

        with socket.create_connection((self.gw.host, self.gw.port), timeout=5.0) as s:
            s.sendall(
                b"POST /v1/workspaces/rooms/events HTTP/1.1\r\n"
                b"Host: gw\r\nContent-Type: application/json\r\n"
                b"Content-Length: 1048577\r\n\r\n"
            )
            status = s.recv(4096).split(b"\r\n", 1)[0]
        assert b"413" in status

    def test_preflight_allows_the_session_headers(self):
        resp = self.client.options("/v1/workspaces/rooms/events")
        assert resp.status_code == 204
        allowed = resp.headers["access-control-allow-headers"]
        assert "X-Session-Id" in allowed
        assert "Last-Event-ID" in allowed

    def test_endpoint_invocation_round_trip(self):
        resp = self.client.post(
            "/v1/workspaces/rooms/endpoints/greet-api", json={"who": "ada"}
        )
        assert resp.status_code == 200
        data = resp.json()
        assert data["status"] == "succeeded"
        assert data["output"]["hello"] == "ada"
        assert data["correlationId"]
        assert data["durationMs"] >= 0
        assert "failure" not in data

    def test_endpoint_failure_is_422_with_the_failure_attached(self):
        resp = self.client.post("/v1/workspaces/rooms/endpoints/greet-api", json={})
        assert resp.status_code == 422
        data = resp.json()
        assert data["status"] == "failed"
        assert data["failure"]["code"] == "argument-invalid"

    def test_endpoint_sessions_ride_the_header(self):
        for expected in ("x", "xx"):
            resp = self.client.post(
                "/v1/workspaces/rooms/endpoints/greet-api",
                json={"who": "bo"},
                headers={"X-Session-Id": "api-caller"},
            )
            assert resp.json()["output"]["calls"] == expected

    def test_unknown_endpoint_is_404(self):
        assert self.client.post("/v1/workspaces/rooms/endpoints/nope", json={}).status_code == 404

    def test_pages_listing_and_detail(self):
        resp = self.client.get("/v1/workspaces/doc-portal/pages")
        assert resp.status_code == 200
        pages = resp.json()["pages"]
        assert {"slug": "upload", "name": "Upload", "blocks": 2} in pages

        detail = self.client.get("/v1/workspaces/doc-portal/pages/upload").json()
        assert detail["slug"] == "upload"
        kinds = [b["kind"] for b in detail["blocks"]]
        assert kinds == ["form", "rich-text"]
        form = detail["blocks"][0]
        assert form["onEvent"] == {"submit": "portal.upload"}

        assert self.client.get("/v1/workspaces/doc-portal/pages/ghost").status_code == 404

    def test_graph_shows_imported_automations_with_provenance(self):
        data = self.client.get("/v1/workspaces/doc-portal/graph").json()
        assert set(data) == {"workspace", "automations", "pages", "events", "calls"}
        by_slug = {a["slug"]: a for a in data["automations"]}
        assert by_slug["mail.vision.run-ocr"]["app"] == "ocr-app"
        assert {"from": "mail.vision.run-ocr", "to": "mail.vision.normalize"} in data["calls"]


@pytest.mark.usefixtures("served")
class TestEventStream:
    def test_stream_replays_then_follows_live(self):
        sid = "stream-live"
        got = {}

        def read():
            with self.client.stream(
                "GET", f"/v1/workspaces/rooms/sessions/{sid}/events"
            ) as resp:
                got["status"] = resp.status_code
                got["frames"] = sse_frames(
                    resp, lambda fs: any(f["data"]["type"] == "msg.out" for f in fs)
                )

        reader = threading.Thread(target=read)
        reader.start()
        time.sleep(0.2)  # let the subscription attach
        self.client.post(
            "/v1/workspaces/rooms/events",
            json={"event": "msg.in", "payload": {}},
            headers={"X-Session-Id": sid},
        )
        reader.join(timeout=10.0)
        assert not reader.is_alive()
        assert got["status"] == 200
        types = [f["data"]["type"] for f in got["frames"]]
        assert "runtime.session.started" in types
        assert types.index("msg.in") < types.index("msg.out")
        ids = [f["id"] for f in got["frames"]]
        assert ids == sorted(ids)

    def test_reconnect_with_last_event_id_closes_the_gap_without_duplicates(self):
        sid = "stream-resume"
        for k in (1, 2):
            self.client.post(
                "/v1/workspaces/rooms/events",
                json={"event": "msg.in", "payload": {"k": k}},
                headers={"X-Session-Id": sid},
            )

        def read_batch(headers, stop):
            with self.client.stream(
                "GET", f"/v1/workspaces/rooms/sessions/{sid}/events", headers=headers
            ) as resp:
                assert resp.status_code == 200
                return sse_frames(resp, stop)

        def counts(fs, event_type):
            return sum(f["data"]["type"] == event_type for f in fs)

        # 7 envelopes exist once both runs are fully announced: the session
        # start, two ingests, two replies, two run lifecycles
        first = read_batch(
            {},
            lambda fs: counts(fs, "msg.out") >= 2
            and counts(fs, "runtime.run.succeeded") >= 2,
        )
        assert len(first) == 7
        cut = first[2]["id"]
        resumed = read_batch({"Last-Event-ID": str(cut)}, lambda fs: len(fs) >= 4)
        assert [f["id"] for f in resumed] == [f["id"] for f in first[3:]]
        assert [f["data"]["id"] for f in resumed] == [f["data"]["id"] for f in first[3:]]
        assert set(f["id"] for f in first) | set(f["id"] for f in resumed) == set(
            f["id"] for f in first
        )

    def test_the_after_query_parameter_works_like_the_header(self):
        sid = "stream-after"
        self.client.post(
            "/v1/workspaces/rooms/events",
            json={"event": "msg.in", "payload": {}},
            headers={"X-Session-Id": sid},
        )

        def read_from(path_suffix, want):
            with self.client.stream(
                "GET", f"/v1/workspaces/rooms/sessions/{sid}/events{path_suffix}"
            ) as resp:
                return sse_frames(resp, lambda fs: len(fs) >= want)

        full = read_from("", want=3)
        tail = read_from(f"?after={full[0]['id']}", want=2)
        assert [f["id"] for f in tail[:2]] == [f["id"] for f in full[1:3]]

    def test_a_bad_resume_position_is_a_400(self):
        resp = self.client.get(
            "/v1/workspaces/rooms/sessions/s/events",
            headers={"Last-Event-ID": "abc"},
        )
        assert resp.status_code == 400


class TestLifecycle:
    def test_a_taken_port_raises_port_in_use(self):
        svc = RuntimeService(broker=MemoryBroker())
        gw = Gateway(svc, port=0)
        try:
            with pytest.raises(PortInUse):
                Gateway(svc, port=gw.port)
        finally:
            gw.close()
            svc.close()

    def test_close_is_idempotent_and_frees_the_port(self):
        svc = RuntimeService(broker=MemoryBroker())
        gw = Gateway(svc, port=0)
        port = gw.port
        gw.close()
        gw.close()
        second = Gateway(svc, port=port)  # the port is free again
        second.close()
        svc.close()
