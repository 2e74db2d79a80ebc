"""Command line entry points.

    dsul validate FILE...        check workspace files, print diagnostics
    dsul graph FILE              the service graph as JSON
    dsul run FILE ...            load one workspace and poke it once
    dsul publish FILE            store a workspace as the next app version
    dsul install FILE APP        add an import to a workspace file
    dsul emit WORKSPACE EVENT    send an event to a running gateway
    dsul chat WORKSPACE          scripted chat client against a gateway
    dsul serve FILE...           run the engine behind the HTTP gateway
    dsul bench                   measure the in-process round trip

Exit codes: 0 fine, 1 the operation failed, 2 bad usage or unreadable input.
Commands that take --format print exactly one newline-terminated JSON
document in json mode; human mode is for eyes and makes no stability
promises.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import queue
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Optional

from .bench import run_bench, format_report
from .canonical import canonical_serialize
from .errors import DsulError
from .gateway import Gateway
from .graph import service_graph_data
from .model import LATEST
from .parser import load_workspace_file
from .registry import Registry
from .resolve import resolve_workspace
from .runtime import RuntimeService
from .store import ScopeStore
from .validate import validate_workspace

DEFAULT_BIND = "127.0.0.1:8400"

# Diagnostics from these codes mean the input could not even be read.
_IO_CODES = {"DSUL-io", "DSUL-encoding"}


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DsulError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


def _positive_int(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{raw!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _nonnegative_int(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{raw!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError("must not be negative")
    return value


def _add_format(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("human", "json"), default="human",
                   help="output format (json prints one document)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsul", description="Declarative service engine.")
    sub = parser.add_subparsers(required=True, metavar="command")

    p = sub.add_parser("validate", help="check workspace files")
    p.add_argument("files", nargs="+", metavar="FILE")
    p.add_argument("--registry-dir", help="resolve imports against this app registry")
    p.add_argument("--strict", action="store_true", help="treat warnings as failures")
    _add_format(p)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("graph", help="print the service graph as JSON")
    p.add_argument("file", metavar="FILE")
    p.add_argument("--registry-dir", help="include imported apps in the graph")
    p.set_defaults(func=_cmd_graph)

    p = sub.add_parser("run", help="load a workspace and run one thing")
    p.add_argument("file", metavar="FILE")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--endpoint", metavar="SLUG", help="run this endpoint automation")
    group.add_argument("--event", metavar="NAME", help="ingest this event instead")
    p.add_argument("--args", default="{}", help="JSON arguments for --endpoint")
    p.add_argument("--payload", default="{}", help="JSON payload for --event")
    p.add_argument("--session", help="session id to run under")
    p.add_argument("--registry-dir", help="app registry for imports")
    p.add_argument("--store-dir", help="scope store directory")
    p.add_argument("--watch", type=float, default=2.0, metavar="SECONDS",
                   help="with --event, how long to watch for resulting events")
    _add_format(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("publish", help="store a workspace as the next version of its app")
    p.add_argument("file", metavar="FILE")
    p.add_argument("--registry-dir", help="app registry directory")
    _add_format(p)
    p.set_defaults(func=_cmd_publish)

    p = sub.add_parser("install", help="add an import to a workspace file")
    p.add_argument("file", metavar="FILE")
    p.add_argument("app", metavar="APP")
    p.add_argument("--as", dest="slug", help="install slug (default: the app name)")
    p.add_argument("--version", default=LATEST, help="app version (default: latest)")
    p.add_argument("--registry-dir", help="app registry directory")
    _add_format(p)
    p.set_defaults(func=_cmd_install)

    p = sub.add_parser("emit", help="send an event to a running gateway")
    p.add_argument("workspace", metavar="WORKSPACE")
    p.add_argument("event", metavar="EVENT")
    p.add_argument("--payload", default="{}", help="JSON payload")
    p.add_argument("--session", help="session id")
    p.add_argument("--channel", help="channel name")
    p.add_argument("--gateway", default=None, help="gateway base URL")
    p.set_defaults(func=_cmd_emit)

    p = sub.add_parser("chat", help="chat with a served workspace, line by line")
    p.add_argument("workspace", metavar="WORKSPACE")
    p.add_argument("--session", help="session id (default: a fresh one)")
    p.add_argument("--gateway", default=None, help="gateway base URL")
    p.add_argument("--send-event", default="user.msg", help="event each input line becomes")
    p.add_argument("--reply-event", default="bot.msg", help="event printed as a reply")
    p.add_argument("--reply-timeout", type=float, default=10.0, metavar="SECONDS",
                   help="how long to hold a turn open for its reply")
    p.set_defaults(func=_cmd_chat)

    p = sub.add_parser("serve", help="run workspaces behind the HTTP gateway")
    p.add_argument("files", nargs="+", metavar="FILE")
    p.add_argument("--bind", help=f"host:port (default {DEFAULT_BIND})")
    p.add_argument("--registry-dir", help="app registry for imports")
    p.add_argument("--store-dir", help="scope store directory")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench", help="measure the in-process round trip")
    p.add_argument("--iterations", type=_positive_int, default=200)
    p.add_argument("--warmup", type=_nonnegative_int, default=20)
    p.add_argument("--delay-ms", type=float, default=None,
                   help="stall each run by this much (control measurement)")
    _add_format(p)
    p.set_defaults(func=_cmd_bench)

    return parser


def _registry_from(args) -> Optional[Registry]:
    path = getattr(args, "registry_dir", None) or os.environ.get("DSUL_REGISTRY_DIR")
    return Registry(Path(path)) if path else None


def _store_from(args) -> ScopeStore:
    path = getattr(args, "store_dir", None) or os.environ.get("DSUL_STORE_DIR")
    return ScopeStore(Path(path)) if path else ScopeStore()


def _parse_json_arg(raw: str, what: str) -> dict:
    try:
        data = json.loads(raw)
    except ValueError as exc:
        print(f"error: {what} is not valid JSON: {exc}", file=sys.stderr)
        raise SystemExit(2)
    if not isinstance(data, dict):
        print(f"error: {what} must be a JSON object", file=sys.stderr)
        raise SystemExit(2)
    return data


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))


def _is_io_failure(diagnostics) -> bool:
    return any(d.code in _IO_CODES for d in diagnostics)


def _load_file(path: str):
    result = load_workspace_file(path)
    for diag in result.diagnostics:
        print(diag.render(), file=sys.stderr)
    if result.workspace is None:
        raise SystemExit(2 if _is_io_failure(result.diagnostics) else 1)
    return result.workspace


def _cmd_validate(args) -> int:
    registry = _registry_from(args)
    failed = False
    unreadable = False
    reports = []
    for path in args.files:
        result = load_workspace_file(path)
        diagnostics = list(result.diagnostics)
        if result.workspace is not None:
            if registry is not None:
                diagnostics += resolve_workspace(result.workspace, registry).diagnostics
            else:
                diagnostics += validate_workspace(result.workspace)
        errors = sum(1 for d in diagnostics if d.severity == "error")
        warnings = sum(1 for d in diagnostics if d.severity == "warning")
        ok = not errors and not (args.strict and warnings)
        reports.append({
            "path": path,
            "ok": ok,
            "errors": errors,
            "warnings": warnings,
            "diagnostics": [d.to_data() for d in diagnostics],
        })
        if args.format == "human":
            for diag in diagnostics:
                print(diag.render())
            verdict = "ok" if not errors else "invalid"
            print(f"{path}: {verdict} ({errors} error(s), {warnings} warning(s))")
        if not ok:
            failed = True
        if _is_io_failure(diagnostics):
            unreadable = True
    if args.format == "json":
        _print_json({"files": reports})
    if unreadable:
        return 2
    return 1 if failed else 0


def _cmd_graph(args) -> int:
    workspace = _load_file(args.file)
    registry = _registry_from(args)
    resolved = None
    if registry is not None:
        resolved = resolve_workspace(workspace, registry)
        if not resolved.ok:
            for diag in resolved.diagnostics:
                print(diag.render(), file=sys.stderr)
            return 1
    _print_json(service_graph_data(workspace, resolved))
    return 0


def _cmd_run(args) -> int:
    workspace = _load_file(args.file)
    runtime = RuntimeService(registry=_registry_from(args), store=_store_from(args))
    _register_bundled_functions(runtime)
    try:
        runtime.load_workspace(workspace)
        if args.endpoint:
            outcome, correlation = runtime.run_endpoint(
                workspace.slug,
                args.endpoint,
                _parse_json_arg(args.args, "--args"),
                session_id=args.session,
            )
            _print_json(
                {
                    "automation": outcome.automation,
                    "status": outcome.status,
                    "output": outcome.output,
                    "failure": outcome.failure,
                    "warnings": outcome.warnings,
                    "correlationId": correlation,
                }
            )
            return 0 if outcome.ok else 1
        seen = []
        failed = []

        def on_event(envelope) -> None:
            seen.append(envelope)
            if envelope.type == "runtime.run.failed":
                failed.append(envelope)

        sub = runtime.broker.subscribe(workspace.slug, "*", on_event)
        runtime.ingest(
            workspace.slug,
            args.event,
            _parse_json_arg(args.payload, "--payload"),
            session_id=args.session,
        )
        time.sleep(max(args.watch, 0.0))
        runtime.broker.unsubscribe(sub)
        if args.format == "json":
            _print_json({
                "events": [
                    {"type": e.type, "payload": e.payload} for e in seen
                ],
                "failed": bool(failed),
            })
        else:
            for envelope in seen:
                print(f"{envelope.type}  {json.dumps(envelope.payload, sort_keys=True, ensure_ascii=False)}")
        return 1 if failed else 0
    finally:
        runtime.close()


def _register_bundled_functions(runtime: RuntimeService) -> None:
    # the bundled demo functions; namespaced, so they never collide
    from .fixtures import register_fixture_functions

    register_fixture_functions(runtime.functions)


def _cmd_publish(args) -> int:
    registry = _registry_from(args)
    if registry is None:
        print("error: no registry; pass --registry-dir or set DSUL_REGISTRY_DIR", file=sys.stderr)
        return 2
    workspace = _load_file(args.file)
    manifest = registry.publish(workspace)
    if args.format == "json":
        _print_json({"app": manifest.app, "version": manifest.version, "contentHash": manifest.content_hash})
    else:
        print(f"published {manifest.app} version {manifest.version} ({manifest.content_hash[:12]})")
    return 0


def _cmd_install(args) -> int:
    registry = _registry_from(args)
    if registry is None:
        print("error: no registry; pass --registry-dir or set DSUL_REGISTRY_DIR", file=sys.stderr)
        return 2
    version: int | str = args.version
    if version != LATEST:
        try:
            version = int(version)
        except ValueError:
            print(f"error: bad version {args.version!r}", file=sys.stderr)
            return 2
    published = registry.load(args.app, version)
    workspace = _load_file(args.file)
    slug = args.slug or args.app
    from .model import AppInstall

    imports = [inst for inst in workspace.imports if inst.slug != slug]
    imports.append(AppInstall(slug=slug, app=args.app, version=published.manifest.version))
    imports.sort(key=lambda inst: inst.slug)
    workspace = dataclasses.replace(workspace, imports=tuple(imports))
    Path(args.file).write_text(canonical_serialize(workspace), "utf-8")
    if args.format == "json":
        _print_json({
            "app": args.app,
            "version": published.manifest.version,
            "slug": slug,
            "file": args.file,
        })
    else:
        print(f"installed {args.app} version {published.manifest.version} as {slug!r} in {args.file}")
    return 0


def _cmd_emit(args) -> int:
    import httpx

    base = args.gateway or os.environ.get("DSUL_GATEWAY") or f"http://{DEFAULT_BIND}"
    body = {"event": args.event, "payload": _parse_json_arg(args.payload, "--payload")}
    if args.session:
        body["sessionId"] = args.session
    if args.channel:
        body["channel"] = args.channel
    try:
        response = httpx.post(f"{base}/v1/workspaces/{args.workspace}/events", json=body, timeout=10)
    except httpx.HTTPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(response.text.strip())
    return 0 if response.status_code == 202 else 1


def _cmd_chat(args) -> int:
    """Paced chat: read stdin a line at a time, hold each turn open until
    the bot answers. Not a shell; there is no prompt, no history, no line
    editing. Pipe a script in or type blind."""
    import httpx
    import uuid

    from .sse import iter_sse

    base = args.gateway or os.environ.get("DSUL_GATEWAY") or f"http://{DEFAULT_BIND}"
    session = args.session or f"cli-{uuid.uuid4().hex[:12]}"
    stream_url = f"{base}/v1/workspaces/{args.workspace}/sessions/{session}/events"
    ingest_url = f"{base}/v1/workspaces/{args.workspace}/events"

    replies: "queue.Queue" = queue.Queue()
    stop = threading.Event()

    def pump() -> None:
        try:
            with httpx.stream("GET", stream_url, headers={"X-Channel": "cli"}, timeout=None) as response:
                if response.status_code != 200:
                    replies.put(None)
                    return
                for message in iter_sse(response.iter_bytes()):
                    if stop.is_set():
                        return
                    if message.get("type") == args.reply_event:
                        replies.put(message)
        except httpx.HTTPError:
            pass
        finally:
            replies.put(None)

    def next_reply(timeout: float) -> Optional[dict]:
        try:
            message = replies.get(timeout=timeout)
        except queue.Empty:
            return None
        if message is None:
            raise SystemExit(1)
        return message

    def show(message: dict) -> None:
        payload = message.get("payload") or {}
        text = payload.get("text") if isinstance(payload, dict) else None
        print(f"bot> {text if text is not None else json.dumps(payload, sort_keys=True)}")
        sys.stdout.flush()

    thread = threading.Thread(target=pump, name="dsul-chat-stream", daemon=True)
    thread.start()

    # Opening the stream starts the session; a greeting may arrive before
    # the first line is sent.
    greeting = next_reply(timeout=2.0)
    if greeting is not None:
        show(greeting)

    missed = 0
    try:
        for line in sys.stdin:
            text = line.rstrip("\n")
            if not text.strip():
                continue
            body = {
                "event": args.send_event,
                "payload": {"text": text},
                "sessionId": session,
                "channel": "cli",
            }
            response = httpx.post(ingest_url, json=body, timeout=10)
            if response.status_code != 202:
                print(f"error: ingest returned {response.status_code}", file=sys.stderr)
                return 1
            reply = next_reply(timeout=args.reply_timeout)
            if reply is None:
                print("(no reply)", file=sys.stderr)
                missed += 1
                continue
            show(reply)
    finally:
        stop.set()
    return 1 if missed else 0


def _cmd_serve(args) -> int:
    bind = args.bind or os.environ.get("DSUL_BIND") or DEFAULT_BIND
    host, _, port_text = bind.rpartition(":")
    try:
        port = int(port_text)
    except ValueError:
        print(f"error: bad bind address {bind!r}", file=sys.stderr)
        return 2
    runtime = RuntimeService(registry=_registry_from(args), store=_store_from(args))
    _register_bundled_functions(runtime)
    for path in args.files:
        lw = runtime.load_workspace(Path(path))
        for diag in lw.diagnostics:
            print(diag.render(), file=sys.stderr)
        print(f"loaded {lw.id} from {path}", flush=True)
    gateway = Gateway(runtime, host or "127.0.0.1", port)

    # Handlers only set flags: they run mid-bytecode in the main thread, so
    # doing IO (or reload) inside one can re-enter a buffered write.
    wake = threading.Event()
    stopping = []
    reloading = []

    def on_stop(signum, frame) -> None:
        stopping.append(signum)
        wake.set()

    def on_reload(signum, frame) -> None:
        reloading.append(signum)
        wake.set()

    signal.signal(signal.SIGINT, on_stop)
    signal.signal(signal.SIGTERM, on_stop)
    if hasattr(signal, "SIGHUP"):
        signal.signal(signal.SIGHUP, on_reload)
    # flushed so wrapper scripts can scrape the bound port from a pipe; the
    # handlers are installed first so the line also means signal-safe
    print(f"serving on {gateway.url}", flush=True)
    while not stopping:
        wake.wait()
        wake.clear()
        if reloading:
            reloading.clear()
            for slug in runtime.reload():
                print(f"reloaded {slug}", flush=True)
    print("draining")
    gateway.close()
    runtime.close()
    return 0


def _cmd_bench(args) -> int:
    result = run_bench(count=args.iterations, warmup=args.warmup, delay_ms=args.delay_ms)
    if args.format == "json":
        _print_json(result)
    else:
        print(format_report(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
