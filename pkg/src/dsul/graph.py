"""Service graph: the static wiring of a workspace as plain JSON data.

Automations, pages, the events that connect them, and the call edges
between automations. Works on either a bare workspace or the resolved
view of one (qualified names included); ordering is deterministic so the
output diffs cleanly.
"""
from __future__ import annotations

from .instructions import CallAutomation, Emit, Wait, walk_instructions
from .model import NATIVE_EVENTS, Workspace


def service_graph_data(ws: Workspace, resolved=None) -> dict:
    """Build the graph for ws; pass the resolved view to include imports."""
    autos: list[tuple[str, object]] = [(a.slug, a) for a in ws.automations]
    pages = [(p.slug, p) for p in ws.pages]
    provenance: dict[str, str] = {}
    if resolved is not None:
        autos = [(name, r.automation) for name, r in sorted(resolved.automations.items())]
        provenance = {
            name: r.provenance[0] for name, r in resolved.automations.items() if r.provenance is not None
        }
        pages = [(rp.qualified, rp.page) for rp in resolved.pages]

    events: dict[str, dict] = {}

    def event_entry(name: str) -> dict:
        return events.setdefault(
            name,
            {"name": name, "native": name in NATIVE_EVENTS, "emittedBy": [], "listenedBy": [], "pages": []},
        )

    graph_autos = []
    calls = []
    for name, auto in autos:
        entry = {
            "slug": name,
            "name": auto.name,
            "events": sorted(auto.trigger.events),
            "endpoint": auto.trigger.endpoint,
            "private": auto.private,
        }
        if name in provenance:
            entry["app"] = provenance[name]
        graph_autos.append(entry)
        for event in auto.trigger.events:
            event_entry(event)["listenedBy"].append(name)
        emits: set[str] = set()
        waits: set[str] = set()
        for _, instr in walk_instructions(auto.body, ""):
            if isinstance(instr, Emit):
                emits.add(instr.event)
            elif isinstance(instr, Wait):
                waits.add(instr.event)
            elif isinstance(instr, CallAutomation):
                calls.append({"from": name, "to": instr.target})
        for event in sorted(emits):
            event_entry(event)["emittedBy"].append(name)
        for event in sorted(waits):
            listeners = event_entry(event)["listenedBy"]
            if name not in listeners:
                listeners.append(name)

    graph_pages = []
    for page_name, page in pages:
        bound: set[str] = set()
        for block in page.blocks:
            bound.update(block.on_event.values())
        graph_pages.append(
            {"slug": page_name, "name": page.name, "blocks": [b.kind for b in page.blocks], "emits": sorted(bound)}
        )
        for event in bound:
            event_entry(event)["pages"].append(page_name)

    for entry in events.values():
        entry["emittedBy"].sort()
        entry["listenedBy"].sort()
        entry["pages"].sort()

    return {
        "workspace": ws.slug,
        "automations": graph_autos,
        "pages": graph_pages,
        "events": [events[k] for k in sorted(events)],
        "calls": sorted(calls, key=lambda c: (c["from"], c["to"])),
    }
