"""The interpreter: runs one automation against live scopes and services.

Pure instructions (set, delete, conditions, repeat, break, emit, comment)
are evaluated in place. Effectful ones (wait, fetch, custom, calls, all)
go through the Services seam so the runtime, tests, and the benchmark can
provide different worlds. Failures are lenient where the language says so
(missing reads are null, refused writes are warnings) and loud where an
author must know (timeouts without a landing path, broken fetches, budget
exhaustion).
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from .errors import DuplicateFunction, EventBudgetExhausted
from .expressions import (
    Compare,
    Exists,
    Expression,
    ListExpr,
    Literal,
    Logic,
    MapExpr,
    Template,
    VarRef,
    single_hole_path,
)
from .instructions import (
    AllBranches,
    Break,
    CallAutomation,
    Comment,
    Conditions,
    Custom,
    DeleteVar,
    Emit,
    Fetch,
    Instruction,
    Repeat,
    SetVar,
    Wait,
)
from .paths import VarPath, path_delete, path_get, path_set
from .resolve import ResolvedAutomation, ResolvedWorkspace
from .values import MAX_EXACT_INT, Value, deep_copy, ensure_value, is_truthy, render_text, value_equal

MAX_CALL_DEPTH = 32
MAX_REPEAT_COUNT = 100_000

# Failure codes carried by runtime.run.failed payloads.
FAIL_WAIT_TIMEOUT = "wait-timeout"
FAIL_FETCH = "fetch-error"
FAIL_FUNCTION = "function-error"
FAIL_UNKNOWN_FUNCTION = "unknown-function"
FAIL_CALL_DEPTH = "call-depth-exceeded"
FAIL_CALL = "call-failed"
FAIL_PRIVATE = "private-access"
FAIL_UNRESOLVED_CALL = "unresolved-call"
FAIL_ARGUMENT = "argument-invalid"
FAIL_BUDGET = "event-budget-exhausted"
FAIL_REPEAT = "repeat-limit"
FAIL_INTERNAL = "internal-error"


class RunFailure(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _BreakLoop(Exception):
    """Unwinds to the nearest repeat; at the top of a body it ends the run."""


class HostFunctionRegistry:
    """Named host functions callable from custom instructions."""

    def __init__(self):
        self._functions: dict[str, Callable[[dict], Value]] = {}
        self._lock = threading.Lock()

    def register(self, name: str, fn: Callable[[dict], Value]) -> None:
        with self._lock:
            if name in self._functions:
                raise DuplicateFunction(f"host function {name!r} already registered")
            self._functions[name] = fn

    def get(self, name: str) -> Optional[Callable[[dict], Value]]:
        with self._lock:
            return self._functions.get(name)

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._functions)


class Services(Protocol):
    """What the interpreter needs from the world around it."""

    functions: HostFunctionRegistry

    def emit(self, ctx: "ExecutionContext", event: str, payload: Value) -> None: ...

    def wait(self, ctx: "ExecutionContext", event: str, timeout_ms: int) -> tuple[bool, Value]: ...

    def fetch(self, ctx: "ExecutionContext", url: str, method: str, headers: dict, body: Value) -> Value: ...

    def globals_for(self, workspace_id: str, install_path: tuple[str, ...]) -> dict: ...


@dataclass
class ExecutionContext:
    workspace_id: str
    automation: ResolvedAutomation
    services: Services
    resolved: ResolvedWorkspace
    run: dict = field(default_factory=dict)
    arguments: dict = field(default_factory=dict)
    session: dict = field(default_factory=dict)
    session_id: Optional[str] = None
    correlation_id: str = ""
    source_event: Optional[dict] = None
    depth: int = 0
    warnings: list = field(default_factory=list)
    # run-scope write log, present only inside an all branch
    write_log: Optional[list] = None

    @property
    def globals(self) -> dict:
        return self.services.globals_for(self.workspace_id, self.automation.install_path)

    def scope(self, name: str) -> dict:
        if name == "run":
            return self.run
        if name == "session":
            return self.session
        if name == "global":
            return self.globals
        if name == "config":
            return self.automation.config
        if name == "arguments":
            return self.arguments
        raise AssertionError(f"no scope named {name}")

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def fork_branch(self) -> "ExecutionContext":
        """Child context for one branch of all: private run copy + write log."""
        child = ExecutionContext(
            workspace_id=self.workspace_id,
            automation=self.automation,
            services=self.services,
            resolved=self.resolved,
            run=deep_copy(self.run),
            arguments=self.arguments,
            session=self.session,
            session_id=self.session_id,
            correlation_id=self.correlation_id,
            source_event=self.source_event,
            depth=self.depth,
            warnings=self.warnings,
        )
        child.write_log = []
        return child

    def for_call(self, callee: ResolvedAutomation, arguments: dict) -> "ExecutionContext":
        return ExecutionContext(
            workspace_id=self.workspace_id,
            automation=callee,
            services=self.services,
            resolved=self.resolved,
            run={},
            arguments=arguments,
            session=self.session,
            session_id=self.session_id,
            correlation_id=self.correlation_id,
            source_event=self.source_event,
            depth=self.depth + 1,
            warnings=self.warnings,
        )


@dataclass
class RunOutcome:
    automation: str
    status: str  # "succeeded" | "failed"
    output: Value = None
    failure: Optional[dict] = None  # {"code", "message"} when failed
    warnings: list = field(default_factory=list)
    duration_ms: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "succeeded"


def execute_automation(ctx: ExecutionContext) -> RunOutcome:
    """Run ctx.automation to completion. Never raises: failures become a
    failed outcome; lifecycle events are the runtime's business."""
    auto = ctx.automation.automation
    started = time.perf_counter()
    try:
        _check_arguments(ctx)
        try:
            run_body(auto.body, ctx)
        except _BreakLoop:
            pass  # break outside a repeat ends the body
        output = eval_expression(auto.output, ctx) if auto.output is not None else None
        status, failure = "succeeded", None
    except RunFailure as exc:
        output, status, failure = None, "failed", {"code": exc.code, "message": str(exc)}
    except EventBudgetExhausted as exc:
        output, status, failure = None, "failed", {"code": FAIL_BUDGET, "message": str(exc)}
    except Exception as exc:  # a bug, not a language-level failure
        output, status, failure = None, "failed", {"code": FAIL_INTERNAL, "message": f"{type(exc).__name__}: {exc}"}
    return RunOutcome(
        automation=ctx.automation.qualified,
        status=status,
        output=output,
        failure=failure,
        warnings=list(ctx.warnings),
        duration_ms=(time.perf_counter() - started) * 1000.0,
    )


def _check_arguments(ctx: ExecutionContext) -> None:
    for name, spec in ctx.automation.automation.arguments:
        if name not in ctx.arguments:
            if spec.required:
                raise RunFailure(FAIL_ARGUMENT, f"missing required argument {name!r}")
            continue
        if not _argument_fits(ctx.arguments[name], spec.type):
            raise RunFailure(FAIL_ARGUMENT, f"argument {name!r} is not a {spec.type}")


def _argument_fits(value: Value, kind: str) -> bool:
    if kind == "any":
        return True
    if kind == "string":
        return isinstance(value, str)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "object":
        return isinstance(value, dict)
    if kind == "array":
        return isinstance(value, list)
    return True


def run_body(body: tuple[Instruction, ...], ctx: ExecutionContext) -> None:
    for instr in body:
        run_instruction(instr, ctx)


def run_instruction(instr: Instruction, ctx: ExecutionContext) -> None:
    if isinstance(instr, SetVar):
        _write(ctx, instr.path, eval_expression(instr.value, ctx))
    elif isinstance(instr, DeleteVar):
        _delete(ctx, instr.path)
    elif isinstance(instr, Conditions):
        for arm in instr.arms:
            if is_truthy(eval_expression(arm.test, ctx)):
                run_body(arm.body, ctx)
                return
        if instr.otherwise is not None:
            run_body(instr.otherwise, ctx)
    elif isinstance(instr, Repeat):
        try:
            for item in _iterations(eval_expression(instr.source, ctx)):
                _write(ctx, VarPath("run", (instr.item_var,)), item)
                run_body(instr.body, ctx)
        except _BreakLoop:
            pass
    elif isinstance(instr, Break):
        raise _BreakLoop
    elif isinstance(instr, Emit):
        payload = eval_expression(instr.payload, ctx) if instr.payload is not None else {}
        ctx.services.emit(ctx, instr.event, payload)
    elif isinstance(instr, Wait):
        ok, payload = ctx.services.wait(ctx, instr.event, instr.timeout_ms)
        if not ok and instr.into is None:
            raise RunFailure(FAIL_WAIT_TIMEOUT, f"nothing emitted {instr.event!r} within {instr.timeout_ms}ms")
        if instr.into is not None:
            _write(ctx, instr.into, payload if ok else None)
    elif isinstance(instr, Fetch):
        _run_fetch(instr, ctx)
    elif isinstance(instr, Custom):
        _run_custom(instr, ctx)
    elif isinstance(instr, CallAutomation):
        _run_call(instr, ctx)
    elif isinstance(instr, AllBranches):
        _run_all(instr, ctx)
    elif isinstance(instr, Comment):
        pass
    else:
        raise AssertionError(f"not an instruction: {instr!r}")


def _iterations(source: Value) -> list[Value]:
    if isinstance(source, list):
        return list(source)
    if isinstance(source, dict):
        return [{"key": key, "value": source[key]} for key in sorted(source)]
    if isinstance(source, bool) or source is None:
        return []
    if isinstance(source, (int, float)):
        if isinstance(source, float) and (abs(source) > MAX_EXACT_INT or source != int(source)):
            return []
        count = int(source)
        if count > MAX_REPEAT_COUNT:
            raise RunFailure(FAIL_REPEAT, f"repeat over {count} exceeds the {MAX_REPEAT_COUNT} iteration cap")
        return list(range(1, count + 1)) if count > 0 else []
    return []


def _write(ctx: ExecutionContext, path: VarPath, value: Value) -> None:
    target = ctx.scope(path.scope)
    if not path_set(target, path.segments, value):
        ctx.warn(f"write to {path.render()} refused (list index out of range)")
        return
    if ctx.write_log is not None and path.scope == "run":
        ctx.write_log.append(("set", path.segments, deep_copy(value)))


def _delete(ctx: ExecutionContext, path: VarPath) -> None:
    path_delete(ctx.scope(path.scope), path.segments)
    if ctx.write_log is not None and path.scope == "run":
        ctx.write_log.append(("delete", path.segments, None))


def _run_fetch(instr: Fetch, ctx: ExecutionContext) -> None:
    url = render_text(eval_expression(instr.url, ctx))
    headers = {key: render_text(eval_expression(expr, ctx)) for key, expr in instr.headers}
    body = eval_expression(instr.body, ctx) if instr.body is not None else None
    result = ctx.services.fetch(ctx, url, instr.method, headers, body)
    if instr.into is not None:
        _write(ctx, instr.into, result)


def _run_custom(instr: Custom, ctx: ExecutionContext) -> None:
    fn = ctx.services.functions.get(instr.function)
    if fn is None:
        raise RunFailure(FAIL_UNKNOWN_FUNCTION, f"no host function named {instr.function!r}")
    args = {key: eval_expression(expr, ctx) for key, expr in instr.arguments}
    try:
        result = ensure_value(fn(args))
    except RunFailure:
        raise
    except Exception as exc:
        raise RunFailure(FAIL_FUNCTION, f"{instr.function} failed: {exc}") from exc
    if instr.into is not None:
        _write(ctx, instr.into, result)


def _run_call(instr: CallAutomation, ctx: ExecutionContext) -> None:
    callee = ctx.resolved.automations.get(instr.target)
    if callee is None:
        raise RunFailure(FAIL_UNRESOLVED_CALL, f"no automation named {instr.target!r}")
    if callee.automation.private and callee.provenance != ctx.automation.provenance:
        raise RunFailure(FAIL_PRIVATE, f"{instr.target!r} is private to its app")
    if ctx.depth + 1 > MAX_CALL_DEPTH:
        raise RunFailure(FAIL_CALL_DEPTH, f"calls nest past {MAX_CALL_DEPTH}")
    arguments = {key: eval_expression(expr, ctx) for key, expr in instr.arguments}
    outcome = execute_automation(ctx.for_call(callee, arguments))
    if not outcome.ok:
        nested = outcome.failure or {}
        raise RunFailure(FAIL_CALL, f"{instr.target} failed: {nested.get('code')}: {nested.get('message')}")
    if instr.into is not None:
        _write(ctx, instr.into, outcome.output)


def _run_all(instr: AllBranches, ctx: ExecutionContext) -> None:
    """Run branches concurrently; merge run-scope writes in branch order."""
    contexts = [ctx.fork_branch() for _ in instr.branches]
    failures: list[Optional[BaseException]] = [None] * len(instr.branches)

    def run_branch(i: int) -> None:
        try:
            try:
                run_body(instr.branches[i], contexts[i])
            except _BreakLoop:
                pass  # a branch is its own body; break ends the branch
        except BaseException as exc:
            failures[i] = exc

    threads = [
        threading.Thread(target=run_branch, args=(i,), name=f"all-{ctx.automation.qualified}-{i}", daemon=True)
        for i in range(len(instr.branches))
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # Later branches win conflicting writes; the order is the file's.
    for branch_ctx in contexts:
        for kind, segments, value in branch_ctx.write_log or ():
            if kind == "set":
                path_set(ctx.run, segments, value)
            else:
                path_delete(ctx.run, segments)
        if ctx.write_log is not None:
            ctx.write_log.extend(branch_ctx.write_log or ())
    for failure in failures:
        if failure is not None:
            raise failure


# ------------------------------------------------------------- expressions


def eval_expression(expr: Expression, ctx: ExecutionContext) -> Value:
    if isinstance(expr, Literal):
        return deep_copy(expr.value)
    if isinstance(expr, VarRef):
        return deep_copy(_read(ctx, expr.path))
    if isinstance(expr, Exists):
        found, _ = path_get(ctx.scope(expr.path.scope), expr.path.segments)
        return found
    if isinstance(expr, Template):
        hole = single_hole_path(expr)
        if hole is not None:
            return deep_copy(_read(ctx, hole))
        parts = []
        for part in expr.parts:
            parts.append(part if isinstance(part, str) else render_text(_read(ctx, part)))
        return "".join(parts)
    if isinstance(expr, Compare):
        return _compare(expr.op, eval_expression(expr.lhs, ctx), eval_expression(expr.rhs, ctx))
    if isinstance(expr, Logic):
        if expr.op == "not":
            return not is_truthy(eval_expression(expr.operands[0], ctx))
        if expr.op == "and":
            return all(is_truthy(eval_expression(op, ctx)) for op in expr.operands)
        return any(is_truthy(eval_expression(op, ctx)) for op in expr.operands)
    if isinstance(expr, ListExpr):
        return [eval_expression(item, ctx) for item in expr.items]
    if isinstance(expr, MapExpr):
        return {key: eval_expression(val, ctx) for key, val in expr.entries}
    raise AssertionError(f"not an expression: {expr!r}")


def _read(ctx: ExecutionContext, path: VarPath) -> Value:
    _, value = path_get(ctx.scope(path.scope), path.segments)
    return value


def _compare(op: str, lhs: Value, rhs: Value) -> bool:
    if op == "==":
        return value_equal(lhs, rhs)
    if op == "!=":
        return not value_equal(lhs, rhs)
    lhs_num = isinstance(lhs, (int, float)) and not isinstance(lhs, bool)
    rhs_num = isinstance(rhs, (int, float)) and not isinstance(rhs, bool)
    if lhs_num and rhs_num or (isinstance(lhs, str) and isinstance(rhs, str)):
        if op == "<":
            return lhs < rhs
        if op == "<=":
            return lhs <= rhs
        if op == ">":
            return lhs > rhs
        return lhs >= rhs
    return False  # ordering is defined for two numbers or two texts only
