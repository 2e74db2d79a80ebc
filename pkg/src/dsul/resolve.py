"""Install resolution: expand a workspace's imports into one flat view.

Every automation of an installed app is mounted under the install slug
(qualified name ``vision.ocr-run``), and every custom event crossing the
boundary is prefixed the same way, so ``ocr.done`` emitted two installs
deep reaches the host as ``mail.vision.ocr.done``. Runtime events are
global and never prefixed. Apps are snapshots: an install pins one
published version and sees only its own subtree plus the config overrides
written at its import stanza.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .diagnostics import Diagnostic, Location, error, sort_diagnostics
from .errors import RegistryIO, TamperDetected, UnknownApp, UnknownVersion
from .instructions import (
    AllBranches,
    CallAutomation,
    ConditionArm,
    Conditions,
    Emit,
    Instruction,
    Repeat,
    Wait,
)
from .model import (
    Automation,
    BlockInstance,
    MAX_INSTALL_DEPTH,
    Page,
    Trigger,
    Workspace,
    is_reserved_event,
)
from .registry import Registry
from .validate import validate_workspace


@dataclass(frozen=True)
class ResolvedAutomation:
    qualified: str
    automation: Automation  # trigger, events, and call targets rewritten
    install_path: tuple[str, ...]
    provenance: tuple[str, int] | None  # (appSlug, version); None for the host
    config: dict


@dataclass(frozen=True)
class ResolvedPage:
    qualified: str
    page: Page  # onEvent targets rewritten
    install_path: tuple[str, ...]


@dataclass
class ResolvedWorkspace:
    workspace: Workspace
    automations: dict[str, ResolvedAutomation] = field(default_factory=dict)
    pages: list[ResolvedPage] = field(default_factory=list)
    installs: list[dict] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(d.severity == "error" for d in self.diagnostics)


def resolve_workspace(ws: Workspace, registry: Registry | None = None) -> ResolvedWorkspace:
    """Validate ws, then expand its import tree against the registry."""
    resolved = ResolvedWorkspace(workspace=ws)
    resolved.diagnostics.extend(validate_workspace(ws))
    _expand(resolved, ws, (), None, dict(ws.config), (ws.slug,), registry)
    _check_calls(resolved)
    resolved.diagnostics = sort_diagnostics(resolved.diagnostics)
    return resolved


def _expand(
    resolved: ResolvedWorkspace,
    ws: Workspace,
    prefix: tuple[str, ...],
    provenance: tuple[str, int] | None,
    config: dict,
    app_chain: tuple[str, ...],
    registry: Registry | None,
) -> None:
    for auto in ws.automations:
        qualified = ".".join(prefix + (auto.slug,))
        resolved.automations[qualified] = ResolvedAutomation(
            qualified=qualified,
            automation=rewrite_automation(auto, prefix),
            install_path=prefix,
            provenance=provenance,
            config=config,
        )
    for page in ws.pages:
        qualified = ".".join(prefix + (page.slug,))
        resolved.pages.append(
            ResolvedPage(qualified=qualified, page=rewrite_page(page, prefix), install_path=prefix)
        )

    for inst in ws.imports:
        where = _import_location(ws, inst.slug)
        if registry is None:
            resolved.diagnostics.append(
                error("DSUL-import-unresolved", f"import {inst.slug!r}: no registry is configured", where)
            )
            continue
        if inst.app in app_chain:
            chain = " -> ".join(app_chain + (inst.app,))
            resolved.diagnostics.append(
                error("DSUL-install-cycle", f"apps import each other in a cycle: {chain}", where)
            )
            continue
        if len(prefix) + 1 > MAX_INSTALL_DEPTH:
            resolved.diagnostics.append(
                error("DSUL-install-depth", f"imports nest past depth {MAX_INSTALL_DEPTH}", where)
            )
            continue
        try:
            published = registry.load(inst.app, inst.version)
        except (UnknownApp, UnknownVersion) as exc:
            resolved.diagnostics.append(error("DSUL-import-unresolved", str(exc), where))
            continue
        except TamperDetected as exc:
            resolved.diagnostics.append(
                error("DSUL-import-unresolved", f"import {inst.slug!r} failed the integrity check: {exc}", where)
            )
            continue
        except RegistryIO as exc:
            resolved.diagnostics.append(error("DSUL-io", str(exc), where))
            continue
        resolved.installs.append(
            {
                "install": ".".join(prefix + (inst.slug,)),
                "app": published.manifest.app,
                "version": published.manifest.version,
                "contentHash": published.manifest.content_hash,
            }
        )
        merged = {**published.workspace.config, **inst.config}
        _expand(
            resolved,
            published.workspace,
            prefix + (inst.slug,),
            (published.manifest.app, published.manifest.version),
            merged,
            app_chain + (inst.app,),
            registry,
        )


def _check_calls(resolved: ResolvedWorkspace) -> None:
    """Every call edge must land on a known automation it may see."""
    for name in sorted(resolved.automations):
        caller = resolved.automations[name]
        for instr in _iter_calls(caller.automation.body):
            callee = resolved.automations.get(instr.target)
            where = _caller_location(resolved, caller)
            if callee is None:
                resolved.diagnostics.append(
                    error("DSUL-unresolved-call", f"{name!r} calls {instr.target!r}, which does not resolve", where)
                )
            elif callee.automation.private and callee.provenance != caller.provenance:
                resolved.diagnostics.append(
                    error(
                        "DSUL-private-access",
                        f"{name!r} calls private {instr.target!r} across an app boundary",
                        where,
                    )
                )


def _iter_calls(body: tuple[Instruction, ...]):
    from .instructions import walk_instructions

    for _, instr in walk_instructions(body, ""):
        if isinstance(instr, CallAutomation):
            yield instr


def _import_location(ws: Workspace, install_slug: str) -> Location:
    if ws.source is None:
        return Location("<memory>", 1, 1, f"/imports/{install_slug}")
    return ws.source.location(f"/imports/{install_slug}")


def _caller_location(resolved: ResolvedWorkspace, caller: ResolvedAutomation) -> Location:
    if not caller.install_path:
        ws = resolved.workspace
        if ws.source is not None:
            for i, auto in enumerate(ws.automations):
                if auto.slug == caller.qualified:
                    return ws.source.location(f"/automations/{i}")
    return Location("<resolved>", 1, 1, f"/automations/{caller.qualified}")


# ---------------------------------------------------------------- rewrite


def prefix_event(event: str, prefix: tuple[str, ...]) -> str:
    if not prefix or is_reserved_event(event):
        return event
    return ".".join(prefix) + "." + event


def prefix_target(target: str, prefix: tuple[str, ...]) -> str:
    if not prefix:
        return target
    return ".".join(prefix) + "." + target


def rewrite_automation(auto: Automation, prefix: tuple[str, ...]) -> Automation:
    if not prefix:
        return auto
    trigger = Trigger(
        events=tuple(prefix_event(e, prefix) for e in auto.trigger.events),
        endpoint=auto.trigger.endpoint,
    )
    body = tuple(rewrite_instruction(i, prefix) for i in auto.body)
    return replace(auto, trigger=trigger, body=body)


def rewrite_page(page: Page, prefix: tuple[str, ...]) -> Page:
    if not prefix:
        return page
    blocks = tuple(
        BlockInstance(
            kind=b.kind,
            config=b.config,
            on_event={k: prefix_event(v, prefix) for k, v in b.on_event.items()},
        )
        for b in page.blocks
    )
    return replace(page, blocks=blocks)


def rewrite_instruction(instr: Instruction, prefix: tuple[str, ...]) -> Instruction:
    if isinstance(instr, Emit):
        return replace(instr, event=prefix_event(instr.event, prefix))
    if isinstance(instr, Wait):
        return replace(instr, event=prefix_event(instr.event, prefix))
    if isinstance(instr, CallAutomation):
        return replace(instr, target=prefix_target(instr.target, prefix))
    if isinstance(instr, Conditions):
        arms = tuple(
            ConditionArm(test=arm.test, body=tuple(rewrite_instruction(i, prefix) for i in arm.body))
            for arm in instr.arms
        )
        otherwise = None
        if instr.otherwise is not None:
            otherwise = tuple(rewrite_instruction(i, prefix) for i in instr.otherwise)
        return Conditions(arms=arms, otherwise=otherwise)
    if isinstance(instr, Repeat):
        return replace(instr, body=tuple(rewrite_instruction(i, prefix) for i in instr.body))
    if isinstance(instr, AllBranches):
        return AllBranches(
            branches=tuple(tuple(rewrite_instruction(i, prefix) for i in branch) for branch in instr.branches)
        )
    return instr
