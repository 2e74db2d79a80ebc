"""Round trip latency of the full in-process path.

One sample = ingest a ping event, run the triggered automation, and see its
pong come back over a broker subscription. That covers envelope building,
publish, dispatch, interpretation, and the reply publish: everything but
the HTTP layer. Requests are serial on purpose; this measures latency, not
throughput.

The delay variant stalls the automation by a known amount with a host
function, which pins down what the number actually includes: if the control
did not move by the stall, the measurement would be measuring nothing.
"""

from __future__ import annotations

import dataclasses
import math
import threading
import time

from .errors import BenchSetupFailed
from .fixtures import fixture_workspace
from .fixtures.hostfns import bench_delay
from .runtime import RuntimeService

WARMUP = 20
SAMPLES = 200


def percentile(samples: list[float], q: float) -> float:
    """Nearest-rank percentile; q in (0, 100]."""
    if not samples:
        raise ValueError("no samples")
    ordered = sorted(samples)
    rank = math.ceil(q / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def run_bench(
    count: int = SAMPLES,
    warmup: int = WARMUP,
    delay_ms: float | None = None,
    timeout: float = 10.0,
) -> dict:
    """Measure count round trips and summarize in milliseconds."""
    runtime = RuntimeService()
    runtime.functions.register("bench.delay", bench_delay)
    if delay_ms is None:
        workspace = fixture_workspace("echo")
    else:
        workspace = fixture_workspace("echo-delay")
        workspace = dataclasses.replace(
            workspace, config={**workspace.config, "delay-ms": delay_ms}
        )
    runtime.load_workspace(workspace)

    arrivals: dict[int, float] = {}
    flags: dict[int, threading.Event] = {}
    lock = threading.Lock()

    def on_pong(envelope) -> None:
        n = envelope.payload.get("n") if isinstance(envelope.payload, dict) else None
        if not isinstance(n, int):
            return
        with lock:
            arrivals[n] = time.perf_counter()
            flag = flags.get(n)
        if flag is not None:
            flag.set()

    sub = runtime.broker.subscribe(workspace.slug, "pong.msg", on_pong)
    try:
        samples: list[float] = []
        for i in range(warmup + count):
            flag = threading.Event()
            with lock:
                flags[i] = flag
            started = time.perf_counter()
            runtime.ingest(workspace.slug, "ping.msg", {"n": i})
            if not flag.wait(timeout):
                raise BenchSetupFailed(f"round trip {i} never came back")
            with lock:
                finished = arrivals.pop(i)
                del flags[i]
            if i >= warmup:
                samples.append((finished - started) * 1000.0)
        return {
            "samples": len(samples),
            "warmup": warmup,
            "delayMs": delay_ms,
            "min": min(samples),
            "mean": sum(samples) / len(samples),
            "p50": percentile(samples, 50),
            "p90": percentile(samples, 90),
            "p99": percentile(samples, 99),
            "max": max(samples),
        }
    finally:
        try:
            runtime.broker.unsubscribe(sub)
        except Exception:
            pass
        runtime.close()


def format_report(result: dict) -> str:
    delay = result.get("delayMs")
    head = f"{result['samples']} round trips"
    if delay:
        head += f", {delay}ms stall in the automation"
    lines = [head]
    for key in ("min", "p50", "p90", "p99", "max", "mean"):
        lines.append(f"  {key:>5}  {result[key]:8.2f} ms")
    return "\n".join(lines)
