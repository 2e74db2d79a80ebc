"""Canonical form: the one byte-exact YAML rendering of a workspace.

Publishing stores this form and its SHA-256; loading re-renders and must
reproduce the stored bytes, so every choice here is deterministic: sorted
keys, fields equal to their default omitted, strings always double-quoted
with JSON escaping, numbers in shortest round-trip form, two-space indent,
``- `` merged into the first line of each list item.
"""
from __future__ import annotations

import hashlib
import json
import re

from .expressions import expression_to_data
from .instructions import (
    DEFAULT_FETCH_METHOD,
    DEFAULT_ITEM_VAR,
    DEFAULT_WAIT_TIMEOUT_MS,
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
from .model import AppInstall, Automation, BlockInstance, Page, Trigger, Workspace

# Words YAML 1.1 resolves to booleans/null when left unquoted.
_AMBIGUOUS_PLAIN = frozenset(
    {"true", "false", "null", "yes", "no", "on", "off", "y", "n", "~"}
)
_PLAIN_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*$")

# Characters json.dumps leaves raw but YAML 1.1 treats as line breaks or
# rejects as non-printable; they must ride as \u escapes to survive reparse.
_QUOTE_ESCAPE_RE = re.compile("[\x7f-\x9f  ￾￿]")


def content_hash(text: str | bytes) -> str:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()


def canonical_serialize(workspace: Workspace) -> str:
    return render_yaml(workspace_to_data(workspace))


# ---------------------------------------------------------------- encoders


def workspace_to_data(ws: Workspace) -> dict:
    data: dict = {"slug": ws.slug}
    if ws.name != ws.slug:
        data["name"] = ws.name
    if ws.description is not None:
        data["description"] = ws.description
    if ws.config:
        data["config"] = ws.config
    if ws.imports:
        data["imports"] = {inst.slug: install_to_data(inst) for inst in ws.imports}
    if ws.automations:
        data["automations"] = [automation_to_data(a) for a in ws.automations]
    if ws.pages:
        data["pages"] = [page_to_data(p) for p in ws.pages]
    data.update(ws.extensions)
    return data


def install_to_data(inst: AppInstall) -> dict:
    data: dict = {"app": inst.app, "version": inst.version}
    if inst.config:
        data["config"] = inst.config
    return data


def automation_to_data(auto: Automation) -> dict:
    data: dict = {"slug": auto.slug}
    if auto.name != auto.slug:
        data["name"] = auto.name
    if auto.description is not None:
        data["description"] = auto.description
    if auto.private:
        data["private"] = True
    if auto.arguments:
        data["arguments"] = {
            name: argument_to_data(spec) for name, spec in auto.arguments
        }
    if auto.trigger.events or auto.trigger.endpoint:
        data["trigger"] = trigger_to_data(auto.trigger)
    if auto.body:
        data["do"] = [instruction_to_data(i) for i in auto.body]
    if auto.output is not None:
        data["output"] = expression_to_data(auto.output)
    data.update(auto.extensions)
    return data


def argument_to_data(spec) -> dict:
    data: dict = {}
    if spec.type != "any":
        data["type"] = spec.type
    if spec.required:
        data["required"] = True
    return data


def trigger_to_data(trigger: Trigger) -> dict:
    data: dict = {}
    if trigger.events:
        data["events"] = list(trigger.events)
    if trigger.endpoint:
        data["endpoint"] = True
    return data


def page_to_data(page: Page) -> dict:
    data: dict = {"slug": page.slug}
    if page.name != page.slug:
        data["name"] = page.name
    if page.description is not None:
        data["description"] = page.description
    if page.blocks:
        data["blocks"] = [block_to_data(b) for b in page.blocks]
    data.update(page.extensions)
    return data


def block_to_data(block: BlockInstance) -> dict:
    body = dict(block.config)
    if block.on_event:
        body["onEvent"] = dict(block.on_event)
    return {block.kind: body}


def instruction_to_data(instr: Instruction):
    if isinstance(instr, SetVar):
        return {
            "set": {
                "name": instr.path.render(),
                "value": expression_to_data(instr.value),
            }
        }
    if isinstance(instr, DeleteVar):
        return {"delete": instr.path.render()}
    if isinstance(instr, Conditions):
        arms: list = [
            {"if": expression_to_data(arm.test), "then": _body(arm.body)}
            for arm in instr.arms
        ]
        if instr.otherwise is not None:
            arms.append({"else": _body(instr.otherwise)})
        return {"conditions": arms}
    if isinstance(instr, Repeat):
        data: dict = {"over": expression_to_data(instr.source)}
        if instr.item_var != DEFAULT_ITEM_VAR:
            data["as"] = instr.item_var
        data["do"] = _body(instr.body)
        return {"repeat": data}
    if isinstance(instr, AllBranches):
        return {"all": [_body(branch) for branch in instr.branches]}
    if isinstance(instr, Break):
        return "break"
    if isinstance(instr, Emit):
        if instr.payload is None:
            return {"emit": instr.event}
        return {
            "emit": {
                "event": instr.event,
                "payload": expression_to_data(instr.payload),
            }
        }
    if isinstance(instr, Wait):
        if instr.timeout_ms == DEFAULT_WAIT_TIMEOUT_MS and instr.into is None:
            return {"wait": instr.event}
        data = {"event": instr.event}
        if instr.timeout_ms != DEFAULT_WAIT_TIMEOUT_MS:
            data["timeoutMs"] = instr.timeout_ms
        if instr.into is not None:
            data["into"] = instr.into.render()
        return {"wait": data}
    if isinstance(instr, Fetch):
        data = {"url": expression_to_data(instr.url)}
        if instr.method != DEFAULT_FETCH_METHOD:
            data["method"] = instr.method
        if instr.headers:
            data["headers"] = {
                key: expression_to_data(val) for key, val in instr.headers
            }
        if instr.body is not None:
            data["body"] = expression_to_data(instr.body)
        if instr.into is not None:
            data["into"] = instr.into.render()
        return {"fetch": data}
    if isinstance(instr, CallAutomation):
        data = {key: expression_to_data(val) for key, val in instr.arguments}
        if instr.into is not None:
            data["into"] = instr.into.render()
        return {instr.target: data}
    if isinstance(instr, Custom):
        data = {"function": instr.function}
        if instr.arguments:
            data["args"] = {
                key: expression_to_data(val) for key, val in instr.arguments
            }
        if instr.into is not None:
            data["into"] = instr.into.render()
        return {"custom": data}
    if isinstance(instr, Comment):
        return {"comment": instr.text}
    raise TypeError(f"not an instruction: {instr!r}")


def _body(body) -> list:
    return [instruction_to_data(i) for i in body]


# ----------------------------------------------------------------- emitter


def render_yaml(data) -> str:
    """Render plain data as canonical YAML text (trailing newline included)."""
    if not isinstance(data, dict) or not data:
        raise TypeError("canonical document must be a non-empty map")
    return "\n".join(_render(data, 0)) + "\n"


def _render(value, indent: int) -> list[str]:
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            return [pad + "{}"]
        lines: list[str] = []
        for key in sorted(value):
            item = value[key]
            if _is_inline(item):
                lines.append(f"{pad}{_render_key(key)}: {_render_scalar(item)}")
            else:
                lines.append(f"{pad}{_render_key(key)}:")
                lines.extend(_render(item, indent + 1))
        return lines
    if isinstance(value, (list, tuple)):
        if not value:
            return [pad + "[]"]
        lines = []
        for item in value:
            if _is_inline(item):
                lines.append(f"{pad}- {_render_scalar(item)}")
            else:
                sub = _render(item, indent + 1)
                head = sub[0]
                lines.append(pad + "- " + head[len(pad) + 2 :])
                lines.extend(sub[1:])
        return lines
    return [pad + _render_scalar(value)]


def _is_inline(value) -> bool:
    if isinstance(value, (dict, list, tuple)):
        return not value
    return True


def _render_scalar(value) -> str:
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, str):
        return _quote(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        from .values import render_number

        text = render_number(value)
        # YAML 1.1 only resolves a float when a dot is present, so 1e+16
        # must become 1.0e+16 or it would reparse as text.
        if "e" in text and "." not in text:
            text = text.replace("e", ".0e", 1)
        return text
    if isinstance(value, dict):
        return "{}"
    if isinstance(value, (list, tuple)):
        return "[]"
    raise TypeError(f"cannot render {type(value).__name__}")


def _quote(text: str) -> str:
    out = json.dumps(text, ensure_ascii=False)
    return _QUOTE_ESCAPE_RE.sub(lambda m: "\\u%04x" % ord(m.group()), out)


def _render_key(key) -> str:
    if not isinstance(key, str):
        raise TypeError("map keys must be text")
    if _PLAIN_KEY_RE.match(key) and key.lower() not in _AMBIGUOUS_PLAIN:
        return key
    return _quote(key)
