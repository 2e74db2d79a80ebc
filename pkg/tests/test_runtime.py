"""RuntimeService behavior: loading, dispatch, sessions, budgets, scopes.

Everything here drives the public surface (load_workspace, ingest,
run_endpoint, subscribe_session) over an in-memory broker; broker-level
guarantees have their own conformance suite.
"""

import queue
import time

import pytest

from dsul.broker import MemoryBroker
from dsul.errors import (
    IngestRejected,
    UnknownEndpoint,
    UnknownWorkspace,
    WorkspaceLoadError,
)
from dsul.fixtures import (
    chatbot_workspace,
    fixture_workspace,
    publish_chatbot_services,
)
from dsul.interpreter import FAIL_ARGUMENT, FAIL_BUDGET, FAIL_UNKNOWN_FUNCTION
from dsul.runtime import SESSION_RING_SIZE, RuntimeService
from dsul.store import ScopeStore

from broker_conformance import Collector
from conftest import parse_ok

PROBE_WS = """\
slug: probe
automations:
  - slug: mirror
    trigger: {events: ["probe.go"]}
    do:
      - emit:
          event: probe.echo
          payload:
            id: {var: run.event.id}
            type: {var: run.event.type}
            got: {var: run.event.payload.x}
            correlation: {var: run.event.correlationId}
"""


def collect(svc, workspace_id, pattern):
    c = Collector()
    svc.broker.subscribe(workspace_id, pattern, c)
    return c


def replay_when(svc, workspace_id, session_id, ready, timeout=5.0):
    """Poll a session's replay ring until ready(replay) holds. The ring is
    fed by its own broker subscription, so it can trail other subscribers
    briefly even after a run is known to have finished."""
    deadline = time.monotonic() + timeout
    while True:
        replay, _, detach = svc.subscribe_session(workspace_id, session_id)
        detach()
        if ready(replay):
            return replay
        if time.monotonic() > deadline:
            raise AssertionError(f"ring never settled; last: {[e.type for _, e in replay]}")
        time.sleep(0.02)


def count_of(replay, event_type):
    return sum(1 for _, env in replay if env.type == event_type)


class TestLoading:
    def test_load_indexes_triggers_and_endpoints(self, runtime):
        lw = runtime.load_workspace(fixture_workspace("echo"))
        assert lw.id == "echo"
        assert lw.triggers == {"ping.msg": ["reply"]}
        assert lw.endpoints == {}
        assert runtime.workspace("echo") is lw
        assert runtime.workspace_ids() == ["echo"]

    def test_chatbot_endpoint_index_lists_the_sms_webhook(self, runtime_with_registry):
        svc, registry = runtime_with_registry
        publish_chatbot_services(registry)
        lw = svc.load_workspace(chatbot_workspace())
        assert "sms-inbound" in lw.endpoints

    def test_workspace_with_errors_is_refused(self, runtime):
        ws = parse_ok("slug: broken\nautomations:\n  - slug: a\n    do:\n      - nowhere: {}\n")
        with pytest.raises(WorkspaceLoadError) as err:
            runtime.load_workspace(ws)
        assert any(d.code == "DSUL-unresolved-call" for d in err.value.diagnostics)

    def test_unknown_workspace_raises(self, runtime):
        with pytest.raises(UnknownWorkspace):
            runtime.workspace("nope")

    def test_unload_stops_serving(self, runtime):
        runtime.load_workspace(fixture_workspace("echo"))
        runtime.unload_workspace("echo")
        with pytest.raises(UnknownWorkspace):
            runtime.workspace("echo")
        runtime.unload_workspace("echo")  # a second unload is a quiet no-op

    def test_file_backed_load_and_reload(self, runtime, tmp_path):
        path = tmp_path / "ws.yaml"
        path.write_text(PROBE_WS, encoding="utf-8")
        lw = runtime.load_workspace(path)
        assert lw.path == path
        assert runtime.reload() == ["probe"]

    def test_reload_of_a_broken_file_keeps_the_old_version(self, runtime, tmp_path):
        path = tmp_path / "ws.yaml"
        path.write_text(PROBE_WS, encoding="utf-8")
        runtime.load_workspace(path)
        path.write_text("slug: probe\nautomations: {not: a list}\n", encoding="utf-8")
        assert runtime.reload() == []
        assert runtime.workspace("probe").triggers == {"probe.go": ["mirror"]}

    def test_reloading_in_memory_swaps_by_slug(self, runtime):
        runtime.load_workspace(parse_ok("slug: twice\nautomations:\n  - slug: a\n    trigger: {events: [one.go]}\n    do: []\n"))
        lw = runtime.load_workspace(parse_ok("slug: twice\nautomations:\n  - slug: b\n    trigger: {events: [two.go]}\n    do: []\n"))
        assert runtime.workspace("twice") is lw
        assert lw.triggers == {"two.go": ["b"]}


class TestNativeEvents:
    def test_load_announces_the_workspace(self, runtime):
        c = Collector()
        runtime.broker.subscribe("echo", "runtime.workspace.loaded", c)
        runtime.load_workspace(fixture_workspace("echo"))
        (env,) = c.wait_for(1)
        assert env.payload == {"workspaceId": "echo", "automations": 1, "pages": 0, "imports": 0}

    def test_installs_are_announced_with_their_hashes(self, runtime_with_registry):
        svc, registry = runtime_with_registry
        from dsul.fixtures import publish_document_suite

        portal = publish_document_suite(registry)
        c = Collector()
        svc.broker.subscribe(portal.slug, "runtime.app.installed", c)
        lw = svc.load_workspace(portal)
        envs = c.wait_for(len(lw.resolved.installs))
        announced = {(e.payload["install"], e.payload["app"]) for e in envs}
        assert ("mail", "mail-app") in announced
        assert all(len(e.payload["contentHash"]) == 64 for e in envs)

    def test_reload_announces_only_new_automations(self, runtime):
        base = "slug: grow\nautomations:\n  - slug: a\n    trigger: {events: [one.go]}\n    do: []\n"
        runtime.load_workspace(parse_ok(base))
        c = Collector()
        runtime.broker.subscribe("grow", "runtime.automation.added", c)
        runtime.load_workspace(
            parse_ok(base + "  - slug: b\n    trigger: {events: [two.go]}\n    do: []\n")
        )
        (env,) = c.wait_for(1)
        assert env.payload == {"workspaceId": "grow", "automation": "b"}
        assert c.settled_count() == 1  # automation a was not re-announced

    def test_native_triggered_runs_finish_before_load_returns(self, runtime):
        ws = parse_ok(
            """\
slug: boots
automations:
  - slug: greet
    trigger: {events: ["runtime.workspace.loaded"]}
    do:
      - emit: "boot.done"
"""
        )
        c = Collector()
        runtime.broker.subscribe("boots", "boot.done", c)
        runtime.load_workspace(ws)
        assert c.wait_for(1)[0].type == "boot.done"

    def test_successful_runs_are_announced(self, runtime):
        runtime.load_workspace(parse_ok(PROBE_WS))
        c = collect(runtime, "probe", "runtime.run.succeeded")
        sent = runtime.ingest("probe", "probe.go", {"x": 1})
        (env,) = c.wait_for(1)
        assert env.payload["automation"] == "mirror"
        assert env.payload["correlationId"] == sent.source.correlation_id
        assert env.payload["durationMs"] >= 0
        assert env.payload["warnings"] == []

    def test_failed_runs_carry_the_failure(self, runtime):
        ws = parse_ok(
            """\
slug: faily
automations:
  - slug: crash
    trigger: {events: ["go.now"]}
    do:
      - custom: {function: no.such}
"""
        )
        runtime.load_workspace(ws)
        c = collect(runtime, "faily", "runtime.run.failed")
        runtime.ingest("faily", "go.now")
        (env,) = c.wait_for(1)
        assert env.payload["failure"]["code"] == FAIL_UNKNOWN_FUNCTION

    def test_lifecycle_handlers_do_not_announce_themselves(self, runtime):
        ws = parse_ok(
            """\
slug: audit
automations:
  - slug: work
    trigger: {events: ["job.go"]}
    do: []
  - slug: log-it
    trigger: {events: ["runtime.run.succeeded"]}
    do:
      - emit: "audit.note"
"""
        )
        runtime.load_workspace(ws)
        done = collect(runtime, "audit", "runtime.run.succeeded")
        note = collect(runtime, "audit", "audit.note")
        runtime.ingest("audit", "job.go")
        note.wait_for(1)  # the handler really ran
        assert done.settled_count() == 1  # but only the original run was announced


class TestIngest:
    def test_reserved_and_malformed_events_are_rejected(self, runtime):
        runtime.load_workspace(fixture_workspace("echo"))
        with pytest.raises(IngestRejected):
            runtime.ingest("echo", "runtime.workspace.loaded")
        with pytest.raises(IngestRejected):
            runtime.ingest("echo", "Not An Event")

    def test_non_value_payload_is_rejected(self, runtime):
        runtime.load_workspace(fixture_workspace("echo"))
        with pytest.raises(IngestRejected):
            runtime.ingest("echo", "ping.msg", object())

    def test_ingest_into_an_unloaded_workspace_raises(self, runtime):
        with pytest.raises(UnknownWorkspace):
            runtime.ingest("echo", "ping.msg")

    def test_triggered_run_sees_the_flattened_event(self, runtime):
        runtime.load_workspace(parse_ok(PROBE_WS))
        c = collect(runtime, "probe", "probe.echo")
        sent = runtime.ingest("probe", "probe.go", {"x": 41}, correlation_id="corr-fixed")
        (env,) = c.wait_for(1)
        assert env.payload == {
            "id": sent.id,
            "type": "probe.go",
            "got": 41,
            "correlation": "corr-fixed",
        }
        assert env.source.correlation_id == "corr-fixed"

    def test_missing_payload_defaults_to_an_empty_map(self, runtime):
        runtime.load_workspace(fixture_workspace("echo"))
        env = runtime.ingest("echo", "ping.msg")
        assert env.payload == {}


class TestEndpoints:
    ENDPOINT_WS = """\
slug: doors
automations:
  - slug: greet-api
    trigger: {endpoint: true}
    arguments:
      who: {type: string, required: true}
    do:
      - set: {name: run.kind, value: {var: run.event.type}}
    output:
      hello: {var: arguments.who}
      kind: {var: run.kind}
  - slug: not-an-endpoint
    trigger: {events: ["x.go"]}
    do: []
"""

    def test_endpoint_runs_synchronously_with_payload_as_arguments(self, runtime):
        runtime.load_workspace(parse_ok(self.ENDPOINT_WS))
        outcome, correlation = runtime.run_endpoint("doors", "greet-api", {"who": "ada"})
        assert outcome.ok
        assert outcome.output == {"hello": "ada", "kind": "endpoint:greet-api"}
        assert correlation

    def test_non_map_payload_is_wrapped(self, runtime):
        runtime.load_workspace(parse_ok(self.ENDPOINT_WS))
        outcome, _ = runtime.run_endpoint("doors", "greet-api", "just text")
        assert not outcome.ok  # "who" is required and a bare payload cannot supply it
        assert outcome.failure["code"] == FAIL_ARGUMENT

    def test_only_endpoint_automations_are_exposed(self, runtime):
        runtime.load_workspace(parse_ok(self.ENDPOINT_WS))
        with pytest.raises(UnknownEndpoint):
            runtime.run_endpoint("doors", "not-an-endpoint", {})
        with pytest.raises(UnknownEndpoint):
            runtime.run_endpoint("doors", "missing", {})

    def test_endpoint_announces_its_run(self, runtime):
        runtime.load_workspace(parse_ok(self.ENDPOINT_WS))
        c = collect(runtime, "doors", "runtime.run.succeeded")
        _, correlation = runtime.run_endpoint("doors", "greet-api", {"who": "bo"})
        (env,) = c.wait_for(1)
        assert env.payload["automation"] == "greet-api"
        assert env.payload["correlationId"] == correlation


SESSION_WS = """\
slug: rooms
automations:
  - slug: count
    trigger: {events: ["msg.in"]}
    do:
      - set: {name: session.n, value: "{{ session.n }}x"}
      - emit:
          event: msg.out
          payload: {n: {var: session.n}}
"""


class TestSessions:
    def test_session_scope_persists_across_runs(self, runtime):
        runtime.load_workspace(parse_ok(SESSION_WS))
        c = collect(runtime, "rooms", "msg.out")
        runtime.ingest("rooms", "msg.in", session_id="s1", channel="webchat")
        runtime.ingest("rooms", "msg.in", session_id="s1", channel="webchat")
        envs = c.wait_for(2)
        assert [e.payload["n"] for e in envs] == ["x", "xx"]

    def test_sessions_are_isolated_from_each_other(self, runtime):
        runtime.load_workspace(parse_ok(SESSION_WS))
        c = collect(runtime, "rooms", "msg.out")
        runtime.ingest("rooms", "msg.in", session_id="s1")
        c.wait_for(1)
        runtime.ingest("rooms", "msg.in", session_id="s2")
        envs = c.wait_for(2)
        assert sorted(e.payload["n"] for e in envs) == ["x", "x"]

    def test_feed_replays_session_events_in_order(self, runtime):
        runtime.load_workspace(parse_ok(SESSION_WS))
        out = collect(runtime, "rooms", "msg.out")
        runtime.ingest("rooms", "msg.in", {"k": 1}, session_id="s1")
        out.wait_for(1)
        runtime.ingest("rooms", "msg.in", {"k": 2}, session_id="s1")
        out.wait_for(2)
        replay = replay_when(runtime, "rooms", "s1", lambda r: count_of(r, "msg.out") >= 2)
        interesting = [env.type for _, env in replay if env.type in ("msg.in", "msg.out")]
        assert interesting == ["msg.in", "msg.out", "msg.in", "msg.out"]
        seqs = [seq for seq, _ in replay]
        assert seqs == list(range(seqs[0], seqs[0] + len(seqs)))

    def test_replay_after_a_sequence_number_skips_the_prefix(self, runtime):
        runtime.load_workspace(parse_ok(SESSION_WS))
        out = collect(runtime, "rooms", "msg.out")
        runtime.ingest("rooms", "msg.in", session_id="s1")
        out.wait_for(1)
        # settle on the lifecycle envelope: it is the last thing published,
        # so once it is in the ring the snapshot cannot grow under us
        full = replay_when(
            runtime, "rooms", "s1", lambda r: count_of(r, "runtime.run.succeeded") >= 1
        )
        cut = full[1][0]
        tail, _, detach = runtime.subscribe_session("rooms", "s1", after_seq=cut)
        detach()
        assert tail == full[2:]
        assert tail  # something actually remained past the cut

    def test_live_queue_sees_new_events_and_detach_stops_them(self, runtime):
        runtime.load_workspace(parse_ok(SESSION_WS))
        out = collect(runtime, "rooms", "msg.out")
        _, live, detach = runtime.subscribe_session("rooms", "s1")
        runtime.ingest("rooms", "msg.in", session_id="s1")
        out.wait_for(1)
        got = [live.get(timeout=5.0)]
        while True:
            try:
                got.append(live.get(timeout=0.2))
            except queue.Empty:
                break
        assert [env.type for _, env in got].count("msg.out") == 1
        detach()
        runtime.ingest("rooms", "msg.in", session_id="s1")
        out.wait_for(2)
        time.sleep(0.1)
        assert live.empty()

    def test_untagged_events_reach_every_session_feed(self, runtime):
        runtime.load_workspace(parse_ok(SESSION_WS))
        _, live1, d1 = runtime.subscribe_session("rooms", "s1")
        _, live2, d2 = runtime.subscribe_session("rooms", "s2")
        runtime.ingest("rooms", "msg.in")  # no session tag

        def drain_until(live, event_type):
            deadline = time.monotonic() + 5.0
            while True:
                seq, env = live.get(timeout=max(0.01, deadline - time.monotonic()))
                if env.type == event_type:
                    return env

        assert drain_until(live1, "msg.in").payload == {}
        assert drain_until(live2, "msg.in").payload == {}
        d1()
        d2()

    def test_the_ring_keeps_only_the_newest_window(self, runtime):
        runtime.load_workspace(fixture_workspace("echo"))
        total = SESSION_RING_SIZE + 8
        for n in range(total):
            runtime.ingest("echo", "other.note", {"n": n}, session_id="s1")
        replay = replay_when(
            runtime,
            "echo",
            "s1",
            lambda r: r and r[-1][1].type == "other.note" and r[-1][1].payload["n"] == total - 1,
        )
        assert len(replay) == SESSION_RING_SIZE
        seqs = [seq for seq, _ in replay]
        assert seqs == list(range(seqs[0], seqs[0] + SESSION_RING_SIZE))
        assert replay[0][0] > 1  # the oldest entries were evicted

    def test_a_new_session_announces_itself_before_the_first_event(self, runtime):
        ws = parse_ok(
            """\
slug: lobby
automations:
  - slug: greet
    trigger: {events: ["runtime.session.started"]}
    do:
      - emit:
          event: hello.note
          payload: {sid: {var: run.event.sessionId}}
  - slug: answer
    trigger: {events: ["msg.in"]}
    do:
      - emit: "answer.note"
"""
        )
        runtime.load_workspace(ws)
        seen = collect(runtime, "lobby", "*")
        runtime.ingest("lobby", "msg.in", session_id="s9")
        types = [e.type for e in seen.wait_for(4)]
        # the greeting emitted by the session-start handler precedes the
        # ingested event that created the session
        assert types.index("hello.note") < types.index("msg.in")
        hello = next(e for e in seen.snapshot() if e.type == "hello.note")
        assert hello.payload == {"sid": "s9"}


class TestWaitWake:
    WAITER_WS = """\
slug: pause
automations:
  - slug: hold
    trigger: {events: ["start.go"]}
    do:
      - wait: {event: user.reply, timeoutMs: 5000, into: run.answer}
      - emit:
          event: done.note
          payload: {answer: {var: run.answer.text}}
"""

    def test_a_waiting_run_wakes_on_the_matching_event(self, runtime):
        runtime.load_workspace(parse_ok(self.WAITER_WS))
        done = collect(runtime, "pause", "done.note")
        runtime.ingest("pause", "start.go", session_id="s1")
        time.sleep(0.15)  # let the run reach its wait
        runtime.ingest("pause", "user.reply", {"text": "sure"}, session_id="s1")
        (env,) = done.wait_for(1)
        assert env.payload == {"answer": "sure"}

    def test_the_wait_ignores_other_sessions(self, runtime):
        runtime.load_workspace(parse_ok(self.WAITER_WS))
        done = collect(runtime, "pause", "done.note")
        runtime.ingest("pause", "start.go", session_id="s1")
        time.sleep(0.15)
        runtime.ingest("pause", "user.reply", {"text": "wrong room"}, session_id="s2")
        time.sleep(0.15)
        runtime.ingest("pause", "user.reply", {"text": "right room"}, session_id="s1")
        envs = done.wait_for(1)
        assert envs[0].payload == {"answer": "right room"}


class TestDispatchOrdering:
    def test_one_correlation_runs_serially_in_submit_order(self, runtime):
        marks = []
        runtime.functions.register("mark.step", lambda args: marks.append(args["tag"]) or "ok")
        ws = parse_ok(
            """\
slug: lanes
automations:
  - slug: slow
    trigger: {events: ["slow.go"]}
    do:
      - custom: {function: mark.step, args: {tag: {lit: "slow-start"}}}
      - wait: {event: never.fires, timeoutMs: 300, into: run.x}
      - custom: {function: mark.step, args: {tag: {lit: "slow-end"}}}
  - slug: quick
    trigger: {events: ["quick.go"]}
    do:
      - custom: {function: mark.step, args: {tag: {lit: "quick"}}}
"""
        )
        runtime.load_workspace(ws)
        done = collect(runtime, "lanes", "runtime.run.succeeded")
        runtime.ingest("lanes", "slow.go", correlation_id="corr-same")
        runtime.ingest("lanes", "quick.go", correlation_id="corr-same")
        done.wait_for(2)
        assert marks == ["slow-start", "slow-end", "quick"]

    def test_different_correlations_do_not_wait_on_each_other(self, runtime):
        runtime.load_workspace(parse_ok(TestWaitWake.WAITER_WS))
        done = collect(runtime, "pause", "done.note")
        # both runs park in their wait; each wakes from the other lane
        runtime.ingest("pause", "start.go", session_id="a")
        runtime.ingest("pause", "start.go", session_id="b")
        time.sleep(0.15)
        runtime.ingest("pause", "user.reply", {"text": "for a"}, session_id="a")
        runtime.ingest("pause", "user.reply", {"text": "for b"}, session_id="b")
        envs = done.wait_for(2)
        assert sorted(e.payload["answer"] for e in envs) == ["for a", "for b"]


class TestEventBudget:
    def test_a_chatty_correlation_is_cut_off(self):
        svc = RuntimeService(broker=MemoryBroker(), event_budget=5)
        try:
            ws = parse_ok(
                """\
slug: chatty
automations:
  - slug: spam
    trigger: {events: ["go.now"]}
    do:
      - repeat:
          over: 10
          do:
            - emit: "noise.note"
"""
            )
            svc.load_workspace(ws)
            failed = Collector()
            svc.broker.subscribe("chatty", "runtime.run.failed", failed)
            svc.ingest("chatty", "go.now")
            (env,) = failed.wait_for(1)
            assert env.payload["failure"]["code"] == FAIL_BUDGET
        finally:
            svc.close()

    def test_each_correlation_gets_its_own_budget(self):
        svc = RuntimeService(broker=MemoryBroker(), event_budget=5)
        try:
            ws = parse_ok(
                """\
slug: polite
automations:
  - slug: few
    trigger: {events: ["go.now"]}
    do:
      - repeat:
          over: 3
          do:
            - emit: "noise.note"
"""
            )
            svc.load_workspace(ws)
            done = Collector()
            svc.broker.subscribe("polite", "runtime.run.succeeded", done)
            svc.ingest("polite", "go.now")
            svc.ingest("polite", "go.now")
            assert len(done.wait_for(2)) == 2
        finally:
            svc.close()


class TestUnknownFunctionWarning:
    def test_loading_warns_about_unregistered_functions(self, runtime):
        ws = parse_ok(
            """\
slug: wishful
automations:
  - slug: hopeful
    trigger: {events: ["go.now"]}
    do:
      - custom: {function: magic.missing}
"""
        )
        lw = runtime.load_workspace(ws)
        warnings = [d for d in lw.diagnostics if d.code == "DSUL-unknown-function"]
        assert len(warnings) == 1
        assert "hopeful" in warnings[0].message
        assert "magic.missing" in warnings[0].message

    def test_registered_functions_do_not_warn(self, runtime):
        runtime.functions.register("magic.missing", lambda args: None)
        ws = parse_ok(
            """\
slug: wishful
automations:
  - slug: hopeful
    trigger: {events: ["go.now"]}
    do:
      - custom: {function: magic.missing}
"""
        )
        lw = runtime.load_workspace(ws)
        assert [d for d in lw.diagnostics if d.code == "DSUL-unknown-function"] == []


class TestScopePersistence:
    GLOBAL_WS = """\
slug: keeper
automations:
  - slug: note
    trigger: {events: ["note.go"]}
    do:
      - set: {name: session.last, value: {var: run.event.payload.text}}
      - set: {name: global.total, value: "{{ global.total }}x"}
"""

    def test_scopes_survive_a_service_restart(self, tmp_path):
        root = tmp_path / "scopes"
        first = RuntimeService(broker=MemoryBroker(), store=ScopeStore(root))
        first.load_workspace(parse_ok(self.GLOBAL_WS))
        done = Collector()
        first.broker.subscribe("keeper", "runtime.run.succeeded", done)
        first.ingest("keeper", "note.go", {"text": "remember me"}, session_id="s1")
        done.wait_for(1)
        first.close()

        second = RuntimeService(broker=MemoryBroker(), store=ScopeStore(root))
        second.load_workspace(parse_ok(self.GLOBAL_WS))
        assert second.store.load("keeper", "session", "s1") == {"last": "remember me"}
        assert second.store.load("keeper", "global", "root") == {"total": "x"}
        second.close()

    def test_hostile_session_ids_stay_inside_the_store_root(self, tmp_path):
        root = tmp_path / "scopes"
        store = ScopeStore(root)
        scope = store.load("ws", "session", "../../escape")
        scope["x"] = 1
        store.flush("ws", "session", "../../escape")
        files = list(root.rglob("*.json"))
        assert len(files) == 1
        assert root.resolve() in files[0].resolve().parents

    def test_store_returns_the_same_live_object(self, tmp_path):
        store = ScopeStore(tmp_path / "scopes")
        one = store.load("ws", "session", "k")
        one["a"] = 1
        assert store.load("ws", "session", "k") is one
        store.drop("ws", "session", "k")
        assert store.load("ws", "session", "k") == {}
