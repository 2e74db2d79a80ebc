"""Workspace-level semantic checks, run after parsing and before resolution.

These rules look across the whole file: slug uniqueness, call targets,
call cycles, and the event audit that flags events nothing listens to and
events nothing emits. Boundary rules that need the registry (import
existence, private access, install cycles) live in the resolver.
"""
from __future__ import annotations

from .diagnostics import Diagnostic, Location, error, sort_diagnostics, warning
from .instructions import CallAutomation, Emit, Wait, walk_instructions
from .model import Automation, Workspace, is_native_event


def validate_workspace(ws: Workspace) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    at = _locator(ws)

    by_slug: dict[str, Automation] = {}
    for i, auto in enumerate(ws.automations):
        if auto.slug in by_slug:
            diags.append(error("DSUL-duplicate-slug", f"automation slug {auto.slug!r} declared twice", at(f"/automations/{i}/slug")))
        else:
            by_slug[auto.slug] = auto

    seen_pages: set[str] = set()
    for i, page in enumerate(ws.pages):
        if page.slug in seen_pages:
            diags.append(error("DSUL-duplicate-slug", f"page slug {page.slug!r} declared twice", at(f"/pages/{i}/slug")))
        seen_pages.add(page.slug)

    install_slugs = {inst.slug for inst in ws.imports}
    for inst in ws.imports:
        if inst.slug in by_slug:
            diags.append(error("DSUL-duplicate-slug", f"install slug {inst.slug!r} collides with an automation", at(f"/imports/{inst.slug}")))

    for i, auto in enumerate(ws.automations):
        base = f"/automations/{i}"
        seen_events: set[str] = set()
        for j, event in enumerate(auto.trigger.events):
            if event in seen_events:
                diags.append(warning("DSUL-duplicate-event", f"event {event!r} listed twice in this trigger", at(f"{base}/trigger/events/{j}")))
            seen_events.add(event)
        for path, instr in walk_instructions(auto.body, f"{base}/do"):
            if isinstance(instr, CallAutomation):
                _check_call_target(instr.target, path, by_slug, install_slugs, diags, at)

    diags.extend(_call_cycles(ws, by_slug, at))
    diags.extend(_event_audit(ws, at))
    return sort_diagnostics(diags)


def _locator(ws: Workspace):
    source = ws.source
    if source is None:
        return lambda path: Location("<memory>", 1, 1, path)
    return source.location


def _check_call_target(target, path, by_slug, install_slugs, diags, at) -> None:
    if "." in target:
        install = target.split(".", 1)[0]
        if install not in install_slugs:
            diags.append(error("DSUL-unresolved-call", f"call target {target!r} names no declared import", at(path)))
    elif target not in by_slug:
        diags.append(error("DSUL-unresolved-call", f"no automation named {target!r} here", at(path)))


def _call_cycles(ws: Workspace, by_slug: dict[str, Automation], at) -> list[Diagnostic]:
    """Static call cycles are flagged, not rejected: the interpreter caps
    call depth, and recursion behind a condition can be legitimate."""
    edges: dict[str, list[str]] = {slug: [] for slug in by_slug}
    for auto in ws.automations:
        for _, instr in walk_instructions(auto.body, ""):
            if isinstance(instr, CallAutomation) and instr.target in by_slug:
                edges[auto.slug].append(instr.target)

    diags: list[Diagnostic] = []
    state: dict[str, int] = {}  # 1 = on stack, 2 = done

    def visit(slug: str, trail: tuple[str, ...]) -> None:
        state[slug] = 1
        for callee in edges[slug]:
            if state.get(callee) == 1:
                cycle = trail[trail.index(callee):] + (callee,)
                diags.append(
                    warning("DSUL-call-cycle", "automations call each other in a cycle: " + " -> ".join(cycle), at("/automations"))
                )
            elif state.get(callee) is None:
                visit(callee, trail + (callee,))
        state[slug] = 2

    for slug in sorted(by_slug):
        if state.get(slug) is None:
            visit(slug, (slug,))
    return diags


def _event_audit(ws: Workspace, at) -> list[Diagnostic]:
    """Who emits what, who listens to what; mismatches become warnings.

    Dotted targets and events that cross an import boundary are excluded:
    only the resolver can see the other side.
    """
    emitted: set[str] = set()
    listened: set[str] = set()
    page_bound: set[str] = set()
    first_emit: dict[str, str] = {}
    first_listen: dict[str, str] = {}

    for i, auto in enumerate(ws.automations):
        base = f"/automations/{i}"
        for j, event in enumerate(auto.trigger.events):
            listened.add(event)
            first_listen.setdefault(event, f"{base}/trigger/events/{j}")
        for path, instr in walk_instructions(auto.body, f"{base}/do"):
            if isinstance(instr, Emit):
                emitted.add(instr.event)
                first_emit.setdefault(instr.event, path)
            elif isinstance(instr, Wait):
                listened.add(instr.event)
                first_listen.setdefault(instr.event, path)

    for page in ws.pages:
        for block in page.blocks:
            for event in block.on_event.values():
                page_bound.add(event)

    install_slugs = {inst.slug for inst in ws.imports}

    def crosses_boundary(event: str) -> bool:
        return "." in event and event.split(".", 1)[0] in install_slugs

    diags: list[Diagnostic] = []
    for event in listened:
        if is_native_event(event) or crosses_boundary(event):
            continue
        if event not in emitted and event not in page_bound:
            diags.append(
                warning(
                    "DSUL-event-never-emitted",
                    f"{event!r} is listened to but nothing here emits it; it can still arrive from the ingress API",
                    at(first_listen[event]),
                )
            )
    for event in emitted:
        if crosses_boundary(event):
            continue
        if event not in listened:
            diags.append(
                warning(
                    "DSUL-event-never-listened",
                    f"{event!r} is emitted but nothing here listens; channel clients can still stream it",
                    at(first_emit[event]),
                )
            )
    return diags
