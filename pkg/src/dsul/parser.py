"""Workspace file parser: YAML text to the typed model, with diagnostics.

Parsing never raises on bad input. Every problem becomes a Diagnostic with
a source location, and a document that produced any error yields no
workspace. The composer API is used instead of safe_load so that node
positions survive, duplicate keys are caught (PyYAML silently keeps the
last one), and anchor expansion stays under an explicit size guard.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import yaml

from .diagnostics import Diagnostic, Location, error, sort_diagnostics, warning
from .expressions import (
    COMPARE_OPS,
    LOGIC_OPS,
    TEMPLATE_HOLE_RE,
    Compare,
    Exists,
    Expression,
    ListExpr,
    Literal,
    Logic,
    MapExpr,
    Template,
    VarRef,
    is_template_text,
)
from .instructions import (
    DEFAULT_ITEM_VAR,
    DEFAULT_WAIT_TIMEOUT_MS,
    FETCH_METHODS,
    RESERVED_INSTRUCTION_KEYWORDS,
    AllBranches,
    Break,
    CallAutomation,
    Comment,
    ConditionArm,
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
from .model import (
    AppInstall,
    ArgumentSpec,
    Automation,
    BlockInstance,
    LATEST,
    Page,
    SourceInfo,
    Trigger,
    Workspace,
    ARGUMENT_TYPES,
    BLOCK_KINDS,
    is_event_name,
    is_native_event,
    is_reserved_event,
    is_slug,
)
from .paths import VarPath, parse_var_path
from .values import MAX_EXACT_INT, Value

# Guards against hostile documents (the billion-laughs family).
MAX_NODES = 50_000
MAX_DEPTH = 100

_IDENT_RE = re.compile(r"^[A-Za-z0-9_-]+$")

_MISSING = object()


@dataclass
class ParseResult:
    workspace: Optional[Workspace]
    diagnostics: list[Diagnostic] = dc_field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.workspace is not None


def parse_workspace(text: str, file_name: str = "<memory>") -> ParseResult:
    """Parse one workspace document. Never raises on bad input."""
    ctx = _Context(file_name)
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        loc = Location(file_name)
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            loc = Location(file_name, mark.line + 1, mark.column + 1)
        ctx.diags.append(error("DSUL-syntax", f"invalid YAML: {_yaml_problem(exc)}", loc))
        return ParseResult(None, ctx.diags)
    except RecursionError:
        ctx.diags.append(error("DSUL-too-large", "document nests too deeply", Location(file_name)))
        return ParseResult(None, ctx.diags)
    if root is None:
        ctx.diags.append(error("DSUL-type-mismatch", "document is empty; a workspace map is required", Location(file_name)))
        return ParseResult(None, ctx.diags)

    try:
        data = ctx.tree(root, "", 0, ())
    except _TooLarge:
        return ParseResult(None, sort_diagnostics(ctx.diags))
    except RecursionError:
        ctx.diags.append(error("DSUL-too-large", "document nests too deeply", Location(file_name)))
        return ParseResult(None, sort_diagnostics(ctx.diags))

    workspace = _Decoder(ctx).workspace(data)
    diags = sort_diagnostics(ctx.diags)
    if any(d.severity == "error" for d in diags):
        return ParseResult(None, diags)
    return ParseResult(workspace, diags)


def load_workspace_file(path: str | Path) -> ParseResult:
    """Read, decode, and parse a workspace file from disk."""
    name = str(path)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        return ParseResult(None, [error("DSUL-io", f"cannot read {name}: {exc.strerror or exc}", Location(name))])
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        return ParseResult(None, [error("DSUL-encoding", f"not valid UTF-8 at byte {exc.start}", Location(name))])
    return parse_workspace(text, name)


def _yaml_problem(exc: yaml.YAMLError) -> str:
    problem = getattr(exc, "problem", None)
    context = getattr(exc, "context", None)
    if problem and context:
        return f"{context} {problem}"
    return problem or str(exc).split("\n")[0]


class _TooLarge(Exception):
    pass


class _Context:
    """Shared state of one parse: diagnostics, locations, size budget."""

    def __init__(self, file_name: str):
        self.file = file_name
        self.diags: list[Diagnostic] = []
        self.locations: dict[str, tuple[int, int]] = {}
        self.nodes = 0
        self.warned_anchors = False
        self.seen: set[int] = set()

    def at(self, json_path: str) -> Location:
        path = json_path
        while True:
            hit = self.locations.get(path)
            if hit is not None:
                return Location(self.file, hit[0], hit[1], json_path)
            if not path:
                return Location(self.file, 1, 1, json_path)
            path = path.rpartition("/")[0]

    def error(self, code: str, message: str, json_path: str) -> None:
        self.diags.append(error(code, message, self.at(json_path)))

    def warn(self, code: str, message: str, json_path: str) -> None:
        self.diags.append(warning(code, message, self.at(json_path)))

    # -------------------------------------------- node tree conversion

    def tree(self, node: yaml.Node, path: str, depth: int, stack: tuple) -> Value:
        """Convert a composed node graph to plain values, expanding aliases."""
        self.nodes += 1
        if self.nodes > MAX_NODES:
            self.error("DSUL-too-large", f"document expands past {MAX_NODES} nodes", path)
            raise _TooLarge
        if depth > MAX_DEPTH:
            self.error("DSUL-too-large", f"document nests past depth {MAX_DEPTH}", path)
            raise _TooLarge

        mark = node.start_mark
        self.locations[path] = (mark.line + 1, mark.column + 1)

        if id(node) in stack:
            self.error("DSUL-anchor-cycle", "alias refers back into its own anchor", path)
            return None
        # An alias reuses the composed node object, so a repeat id means the
        # document used anchors; the expansion is noted once.
        if id(node) in self.seen and not self.warned_anchors:
            self.warned_anchors = True
            self.warn("DSUL-no-anchors", "anchors/aliases were expanded; canonical form has none", path)
        self.seen.add(id(node))
        stack = stack + (id(node),)

        if isinstance(node, yaml.ScalarNode):
            return self._scalar(node, path)
        if isinstance(node, yaml.SequenceNode):
            return [self.tree(child, f"{path}/{i}", depth + 1, stack) for i, child in enumerate(node.value)]
        if isinstance(node, yaml.MappingNode):
            out: dict[str, Value] = {}
            for key_node, value_node in node.value:
                key = self._scalar_key(key_node, path)
                if key is None:
                    continue
                if key in out:
                    self.error("DSUL-duplicate-key", f"duplicate key {key!r}; first one kept", path)
                    continue
                out[key] = self.tree(value_node, f"{path}/{key}", depth + 1, stack)
            return out
        self.error("DSUL-unknown-tag", f"unsupported node kind {type(node).__name__}", path)
        return None

    def _scalar_key(self, node: yaml.Node, path: str) -> Optional[str]:
        if not isinstance(node, yaml.ScalarNode):
            self.error("DSUL-type-mismatch", "map keys must be plain text", path)
            return None
        if node.tag in ("tag:yaml.org,2002:str", "tag:yaml.org,2002:merge"):
            if node.value == "":
                self.error("DSUL-type-mismatch", "map keys must be non-empty text", path)
                return None
            return node.value
        # Unquoted on/off/yes/no/numbers resolve to non-text; insist on text
        # so a key never silently changes meaning.
        self.error(
            "DSUL-type-mismatch",
            f"map key {node.value!r} is not text; quote it",
            path,
        )
        return None

    def _scalar(self, node: yaml.ScalarNode, path: str) -> Value:
        tag = node.tag
        text = node.value
        if tag == "tag:yaml.org,2002:str":
            return text
        if tag == "tag:yaml.org,2002:null":
            return None
        if tag == "tag:yaml.org,2002:bool":
            return text.lower() in ("true", "yes", "on", "y")
        if tag == "tag:yaml.org,2002:int":
            try:
                num = _construct_int(text)
            except ValueError:
                self.error("DSUL-type-mismatch", f"bad integer literal {text!r}", path)
                return None
            if -MAX_EXACT_INT <= num <= MAX_EXACT_INT:
                return num
            return float(num)
        if tag == "tag:yaml.org,2002:float":
            try:
                num = _construct_float(text)
            except ValueError:
                self.error("DSUL-type-mismatch", f"bad number literal {text!r}", path)
                return None
            if num != num or num in (float("inf"), float("-inf")):
                self.error("DSUL-type-mismatch", "numbers must be finite", path)
                return None
            return num
        if tag == "tag:yaml.org,2002:timestamp":
            return text  # no date type; keep the text as written
        self.error("DSUL-unknown-tag", f"unsupported tag {tag}", path)
        return None


def _construct_int(text: str) -> int:
    clean = text.replace("_", "")
    sign = 1
    if clean.startswith(("-", "+")):
        if clean[0] == "-":
            sign = -1
        clean = clean[1:]
    if clean.startswith("0x"):
        return sign * int(clean[2:], 16)
    if clean.startswith("0o"):
        return sign * int(clean[2:], 8)
    if clean.startswith("0b"):
        return sign * int(clean[2:], 2)
    if ":" in clean:  # YAML 1.1 sexagesimal
        total = 0
        for part in clean.split(":"):
            total = total * 60 + int(part)
        return sign * total
    if clean.startswith("0") and len(clean) > 1 and clean.isdigit():
        return sign * int(clean, 8)
    return sign * int(clean)


def _construct_float(text: str) -> float:
    clean = text.replace("_", "").lower()
    stripped = clean.lstrip("+-")
    if stripped == ".inf":
        return float("-inf") if clean.startswith("-") else float("inf")
    if stripped == ".nan":
        return float("nan")
    if ":" in clean:
        sign = -1.0 if clean.startswith("-") else 1.0
        clean = clean.lstrip("+-")
        total = 0.0
        for part in clean.split(":"):
            total = total * 60 + float(part)
        return sign * total
    return float(clean)


class _Decoder:
    """Plain data to typed model, collecting diagnostics along the way."""

    def __init__(self, ctx: _Context):
        self.ctx = ctx

    # ------------------------------------------------------- workspace

    def workspace(self, data: Value) -> Optional[Workspace]:
        ctx = self.ctx
        if not isinstance(data, dict):
            ctx.error("DSUL-type-mismatch", "workspace document must be a map", "")
            return None
        slug = self._slug_field(data, "slug", "", required=True)
        name = self._text_field(data, "name", "") or slug or ""
        description = self._text_field(data, "description", "")
        config = self._value_map(data.get("config", _MISSING), "/config", "config")
        imports = self._imports(data.get("imports", _MISSING))
        automations = self._automations(data.get("automations", _MISSING))
        pages = self._pages(data.get("pages", _MISSING))
        extensions = self._extensions(
            data,
            ("slug", "name", "description", "config", "imports", "automations", "pages"),
            "",
        )
        if slug is None:
            return None
        return Workspace(
            slug=slug,
            name=name,
            description=description,
            config=config,
            imports=imports,
            automations=automations,
            pages=pages,
            extensions=extensions,
            source=SourceInfo(ctx.file, dict(ctx.locations)),
        )

    def _imports(self, data: Value) -> tuple[AppInstall, ...]:
        if data is _MISSING:
            return ()
        if not isinstance(data, dict):
            self.ctx.error("DSUL-type-mismatch", "imports must be a map of install slug to app reference", "/imports")
            return ()
        installs = []
        for key in data:
            path = f"/imports/{key}"
            if not is_slug(key):
                self.ctx.error("DSUL-slug-invalid", f"install slug {key!r} is not a valid slug", path)
                continue
            body = data[key]
            if not isinstance(body, dict):
                self.ctx.error("DSUL-type-mismatch", "an import must be a map with app and version", path)
                continue
            app = self._slug_field(body, "app", path, required=True)
            version = body.get("version", _MISSING)
            if version is _MISSING or version == LATEST:
                pinned: int | str = LATEST
            elif isinstance(version, int) and not isinstance(version, bool) and version >= 1:
                pinned = version
            else:
                self.ctx.error("DSUL-version-invalid", f"version must be a positive integer or {LATEST!r}", f"{path}/version")
                pinned = LATEST
            config = self._value_map(body.get("config", _MISSING), f"{path}/config", "import config")
            self._extensions(body, ("app", "version", "config"), path, strict=True)
            if app is not None:
                installs.append(AppInstall(slug=key, app=app, version=pinned, config=config))
        installs.sort(key=lambda inst: inst.slug)
        return tuple(installs)

    def _automations(self, data: Value) -> tuple[Automation, ...]:
        if data is _MISSING:
            return ()
        if not isinstance(data, list):
            self.ctx.error("DSUL-type-mismatch", "automations must be a list", "/automations")
            return ()
        out = []
        for i, item in enumerate(data):
            auto = self._automation(item, f"/automations/{i}")
            if auto is not None:
                out.append(auto)
        return tuple(out)

    def _automation(self, data: Value, path: str) -> Optional[Automation]:
        ctx = self.ctx
        if not isinstance(data, dict):
            ctx.error("DSUL-type-mismatch", "an automation must be a map", path)
            return None
        slug = self._slug_field(data, "slug", path, required=True)
        if slug is not None and slug in RESERVED_INSTRUCTION_KEYWORDS:
            ctx.error("DSUL-reserved-keyword", f"automation slug {slug!r} is a reserved instruction keyword", f"{path}/slug")
            return None
        name = self._text_field(data, "name", path) or slug or ""
        description = self._text_field(data, "description", path)
        private = self._bool_field(data, "private", path)
        arguments = self._arguments(data.get("arguments", _MISSING), f"{path}/arguments")
        trigger = self._trigger(data.get("trigger", _MISSING), f"{path}/trigger")
        body = self._instruction_list(data.get("do", _MISSING), f"{path}/do")
        output = None
        if "output" in data:
            output = self.expression(data["output"], f"{path}/output")
        extensions = self._extensions(
            data,
            ("slug", "name", "description", "private", "arguments", "trigger", "do", "output"),
            path,
        )
        if slug is None:
            return None
        return Automation(
            slug=slug,
            name=name,
            description=description,
            arguments=arguments,
            trigger=trigger,
            body=body,
            output=output,
            private=private,
            extensions=extensions,
        )

    def _arguments(self, data: Value, path: str) -> tuple[tuple[str, ArgumentSpec], ...]:
        if data is _MISSING:
            return ()
        if not isinstance(data, dict):
            self.ctx.error("DSUL-type-mismatch", "arguments must be a map of name to spec", path)
            return ()
        out = []
        for key in sorted(data):
            arg_path = f"{path}/{key}"
            if not _IDENT_RE.match(key):
                self.ctx.error("DSUL-slug-invalid", f"argument name {key!r} is not a valid identifier", arg_path)
                continue
            spec = data[key]
            if spec is None:
                spec = {}
            if not isinstance(spec, dict):
                self.ctx.error("DSUL-type-mismatch", "an argument spec must be a map", arg_path)
                continue
            arg_type = spec.get("type", "any")
            if arg_type not in ARGUMENT_TYPES:
                self.ctx.error("DSUL-argument-type-invalid", f"argument type {arg_type!r} is not one of {', '.join(ARGUMENT_TYPES)}", f"{arg_path}/type")
                arg_type = "any"
            required = spec.get("required", False)
            if not isinstance(required, bool):
                self.ctx.error("DSUL-type-mismatch", "required must be a boolean", f"{arg_path}/required")
                required = False
            self._extensions(spec, ("type", "required"), arg_path, strict=True)
            out.append((key, ArgumentSpec(type=arg_type, required=required)))
        return tuple(out)

    def _trigger(self, data: Value, path: str) -> Trigger:
        if data is _MISSING:
            return Trigger()
        if not isinstance(data, dict):
            self.ctx.error("DSUL-type-mismatch", "trigger must be a map", path)
            return Trigger()
        events: list[str] = []
        raw = data.get("events", _MISSING)
        authored = isinstance(raw, list) and len(raw) > 0
        if raw is not _MISSING:
            if not isinstance(raw, list):
                self.ctx.error("DSUL-type-mismatch", "trigger events must be a list of event names", f"{path}/events")
            else:
                for i, item in enumerate(raw):
                    event = self._listen_event(item, f"{path}/events/{i}")
                    if event is not None:
                        events.append(event)
        endpoint = self._bool_field(data, "endpoint", path)
        self._extensions(data, ("events", "endpoint"), path, strict=True)
        if not authored and not endpoint:
            self.ctx.error("DSUL-trigger-empty", "trigger names no events and is not an endpoint", path)
        return Trigger(events=tuple(events), endpoint=endpoint)

    def _listen_event(self, item: Value, path: str) -> Optional[str]:
        """An event name in listening position: custom grammar or native."""
        if not isinstance(item, str):
            self.ctx.error("DSUL-type-mismatch", "event name must be text", path)
            return None
        if is_reserved_event(item):
            if is_native_event(item):
                return item
            self.ctx.error("DSUL-unknown-native", f"{item!r} is not a runtime event; the native set is closed", path)
            return None
        if not is_event_name(item):
            self.ctx.error("DSUL-event-name-invalid", f"{item!r} is not 1-8 dotted slug segments", path)
            return None
        return item

    def _emit_event(self, item: Value, path: str) -> Optional[str]:
        """An event name in emitting position: custom grammar only."""
        if not isinstance(item, str):
            self.ctx.error("DSUL-type-mismatch", "event name must be text", path)
            return None
        if is_reserved_event(item):
            self.ctx.error("DSUL-reserved-event", f"cannot emit under the reserved runtime. prefix: {item!r}", path)
            return None
        if not is_event_name(item):
            self.ctx.error("DSUL-event-name-invalid", f"{item!r} is not 1-8 dotted slug segments", path)
            return None
        return item

    def _pages(self, data: Value) -> tuple[Page, ...]:
        if data is _MISSING:
            return ()
        if not isinstance(data, list):
            self.ctx.error("DSUL-type-mismatch", "pages must be a list", "/pages")
            return ()
        out = []
        for i, item in enumerate(data):
            page = self._page(item, f"/pages/{i}")
            if page is not None:
                out.append(page)
        return tuple(out)

    def _page(self, data: Value, path: str) -> Optional[Page]:
        if not isinstance(data, dict):
            self.ctx.error("DSUL-type-mismatch", "a page must be a map", path)
            return None
        slug = self._slug_field(data, "slug", path, required=True)
        name = self._text_field(data, "name", path) or slug or ""
        description = self._text_field(data, "description", path)
        blocks: list[BlockInstance] = []
        raw = data.get("blocks", _MISSING)
        if raw is not _MISSING:
            if not isinstance(raw, list):
                self.ctx.error("DSUL-type-mismatch", "blocks must be a list", f"{path}/blocks")
            else:
                for i, item in enumerate(raw):
                    block = self._block(item, f"{path}/blocks/{i}")
                    if block is not None:
                        blocks.append(block)
        extensions = self._extensions(data, ("slug", "name", "description", "blocks"), path)
        if slug is None:
            return None
        return Page(slug=slug, name=name, description=description, blocks=tuple(blocks), extensions=extensions)

    def _block(self, data: Value, path: str) -> Optional[BlockInstance]:
        if not isinstance(data, dict) or len(data) != 1:
            self.ctx.error("DSUL-type-mismatch", "a block is a single-key map: kind to its config", path)
            return None
        kind = next(iter(data))
        if kind not in BLOCK_KINDS:
            self.ctx.error("DSUL-block-unknown", f"block kind {kind!r} is not one of {', '.join(BLOCK_KINDS)}", path)
            return None
        body = data[kind]
        if body is None:
            body = {}
        if not isinstance(body, dict):
            self.ctx.error("DSUL-type-mismatch", "block config must be a map", f"{path}/{kind}")
            return None
        on_event: dict[str, str] = {}
        raw = body.get("onEvent", _MISSING)
        if raw is not _MISSING:
            if not isinstance(raw, dict):
                self.ctx.error("DSUL-type-mismatch", "onEvent must map a block event to a workspace event", f"{path}/{kind}/onEvent")
            else:
                for key in sorted(raw):
                    event = self._emit_event(raw[key], f"{path}/{kind}/onEvent/{key}")
                    if event is not None:
                        on_event[key] = event
        config = {
            key: self._plain_value(val, f"{path}/{kind}/{key}")
            for key, val in body.items()
            if key != "onEvent"
        }
        return BlockInstance(kind=kind, config=config, on_event=on_event)

    # ----------------------------------------------------- instructions

    def _instruction_list(self, data: Value, path: str) -> tuple[Instruction, ...]:
        if data is _MISSING or data is None:
            return ()
        if not isinstance(data, list):
            self.ctx.error("DSUL-type-mismatch", "a body must be a list of instructions", path)
            return ()
        out = []
        for i, item in enumerate(data):
            instr = self.instruction(item, f"{path}/{i}")
            if instr is not None:
                out.append(instr)
        return tuple(out)

    def instruction(self, data: Value, path: str) -> Optional[Instruction]:
        ctx = self.ctx
        if data == "break":
            return Break()
        if not isinstance(data, dict) or len(data) != 1:
            ctx.error("DSUL-unknown-instruction", "an instruction is a single-key map (or bare break)", path)
            return None
        keyword = next(iter(data))
        body = data[keyword]
        inner = f"{path}/{keyword}"
        if keyword == "set":
            return self._set(body, inner)
        if keyword == "delete":
            return self._delete(body, inner)
        if keyword == "conditions":
            return self._conditions(body, inner)
        if keyword == "repeat":
            return self._repeat(body, inner)
        if keyword == "all":
            return self._all(body, inner)
        if keyword == "break":
            if body is None or body == {}:
                return Break()
            ctx.error("DSUL-type-mismatch", "break takes nothing", inner)
            return None
        if keyword == "emit":
            return self._emit(body, inner)
        if keyword == "wait":
            return self._wait(body, inner)
        if keyword == "fetch":
            return self._fetch(body, inner)
        if keyword == "custom":
            return self._custom(body, inner)
        if keyword == "comment":
            if not isinstance(body, str):
                ctx.error("DSUL-type-mismatch", "comment takes text", inner)
                return None
            return Comment(body)
        return self._call(keyword, body, path)

    def _set(self, body: Value, path: str) -> Optional[SetVar]:
        if not isinstance(body, dict):
            self.ctx.error("DSUL-type-mismatch", "set takes a map with name and value", path)
            return None
        target = self._write_path(body.get("name"), f"{path}/name")
        if "value" not in body:
            self.ctx.error("DSUL-type-mismatch", "set requires a value", path)
            return None
        value = self.expression(body["value"], f"{path}/value")
        self._extensions(body, ("name", "value"), path, strict=True)
        if target is None or value is None:
            return None
        return SetVar(path=target, value=value)

    def _delete(self, body: Value, path: str) -> Optional[DeleteVar]:
        if isinstance(body, dict):
            body = body.get("name")
        target = self._write_path(body, path)
        if target is None:
            return None
        return DeleteVar(path=target)

    def _write_path(self, raw: Value, path: str) -> Optional[VarPath]:
        if not isinstance(raw, str):
            self.ctx.error("DSUL-path-invalid", "a variable path must be text", path)
            return None
        parsed = parse_var_path(raw)
        if parsed is None:
            self.ctx.error("DSUL-path-invalid", f"{raw!r} is not a valid variable path", path)
            return None
        if not parsed.writable:
            self.ctx.error("DSUL-readonly-scope", f"the {parsed.scope} scope is read-only", path)
            return None
        return parsed

    def _read_path(self, raw: Value, path: str, code: str = "DSUL-path-invalid") -> Optional[VarPath]:
        if not isinstance(raw, str):
            self.ctx.error(code, "a variable path must be text", path)
            return None
        parsed = parse_var_path(raw)
        if parsed is None:
            self.ctx.error(code, f"{raw!r} is not a valid variable path", path)
            return None
        return parsed

    def _conditions(self, body: Value, path: str) -> Optional[Conditions]:
        ctx = self.ctx
        if not isinstance(body, list) or not body:
            ctx.error("DSUL-type-mismatch", "conditions takes a non-empty list of if/then arms", path)
            return None
        arms: list[ConditionArm] = []
        otherwise = None
        bad = False
        for i, item in enumerate(body):
            arm_path = f"{path}/{i}"
            if not isinstance(item, dict):
                ctx.error("DSUL-type-mismatch", "a conditions arm must be a map", arm_path)
                bad = True
                continue
            if set(item) == {"else"}:
                if i != len(body) - 1:
                    ctx.error("DSUL-type-mismatch", "else must be the last arm", arm_path)
                    bad = True
                    continue
                otherwise = self._instruction_list(item["else"], f"{arm_path}/else")
                if not otherwise:
                    ctx.warn("DSUL-empty-body", "else arm has no instructions", f"{arm_path}/else")
                continue
            if set(item) != {"if", "then"}:
                ctx.error("DSUL-type-mismatch", "a conditions arm is {if, then} or a final {else}", arm_path)
                bad = True
                continue
            test = self.expression(item["if"], f"{arm_path}/if")
            then = self._instruction_list(item["then"], f"{arm_path}/then")
            if not then:
                ctx.warn("DSUL-empty-body", "then arm has no instructions", f"{arm_path}/then")
            if test is None:
                bad = True
                continue
            arms.append(ConditionArm(test=test, body=then))
        if bad or (not arms and otherwise is None):
            if not arms and otherwise is None and not bad:
                ctx.error("DSUL-type-mismatch", "conditions needs at least one arm", path)
            return None
        return Conditions(arms=tuple(arms), otherwise=otherwise)

    def _repeat(self, body: Value, path: str) -> Optional[Repeat]:
        ctx = self.ctx
        if not isinstance(body, dict):
            ctx.error("DSUL-type-mismatch", "repeat takes a map with over and do", path)
            return None
        if "over" not in body:
            ctx.error("DSUL-type-mismatch", "repeat requires over: the value to iterate", path)
            return None
        source = self.expression(body["over"], f"{path}/over")
        item_var = body.get("as", DEFAULT_ITEM_VAR)
        if not isinstance(item_var, str) or not _IDENT_RE.match(item_var):
            ctx.error("DSUL-type-mismatch", "as must be a plain identifier", f"{path}/as")
            item_var = DEFAULT_ITEM_VAR
        do = self._instruction_list(body.get("do", _MISSING), f"{path}/do")
        if not do:
            ctx.warn("DSUL-empty-body", "repeat body has no instructions", f"{path}/do")
        self._extensions(body, ("over", "as", "do"), path, strict=True)
        if source is None:
            return None
        return Repeat(source=source, body=do, item_var=item_var)

    def _all(self, body: Value, path: str) -> Optional[AllBranches]:
        ctx = self.ctx
        if not isinstance(body, list) or not body:
            ctx.error("DSUL-type-mismatch", "all takes a non-empty list of instruction lists", path)
            return None
        branches = []
        for i, item in enumerate(body):
            if not isinstance(item, list):
                ctx.error("DSUL-type-mismatch", "each branch of all is a list of instructions", f"{path}/{i}")
                return None
            branch = self._instruction_list(item, f"{path}/{i}")
            if not branch:
                ctx.warn("DSUL-empty-body", "branch has no instructions", f"{path}/{i}")
            branches.append(branch)
        return AllBranches(branches=tuple(branches))

    def _emit(self, body: Value, path: str) -> Optional[Emit]:
        if isinstance(body, str):
            event = self._emit_event(body, path)
            return Emit(event=event) if event else None
        if not isinstance(body, dict):
            self.ctx.error("DSUL-type-mismatch", "emit takes an event name or a map with event and payload", path)
            return None
        event = self._emit_event(body.get("event"), f"{path}/event")
        payload = None
        if "payload" in body:
            payload = self.expression(body["payload"], f"{path}/payload")
        self._extensions(body, ("event", "payload"), path, strict=True)
        if event is None:
            return None
        return Emit(event=event, payload=payload)

    def _wait(self, body: Value, path: str) -> Optional[Wait]:
        ctx = self.ctx
        if isinstance(body, str):
            event = self._listen_event(body, path)
            return Wait(event=event) if event else None
        if not isinstance(body, dict):
            ctx.error("DSUL-type-mismatch", "wait takes an event name or a map", path)
            return None
        event = self._listen_event(body.get("event"), f"{path}/event")
        timeout = body.get("timeoutMs", DEFAULT_WAIT_TIMEOUT_MS)
        if not isinstance(timeout, int) or isinstance(timeout, bool) or timeout < 0:
            ctx.error("DSUL-type-mismatch", "timeoutMs must be a non-negative integer", f"{path}/timeoutMs")
            timeout = DEFAULT_WAIT_TIMEOUT_MS
        into = None
        if "into" in body:
            into = self._write_path(body["into"], f"{path}/into")
        self._extensions(body, ("event", "timeoutMs", "into"), path, strict=True)
        if event is None:
            return None
        return Wait(event=event, timeout_ms=timeout, into=into)

    def _fetch(self, body: Value, path: str) -> Optional[Fetch]:
        ctx = self.ctx
        if not isinstance(body, dict):
            ctx.error("DSUL-type-mismatch", "fetch takes a map with url and friends", path)
            return None
        if "url" not in body:
            ctx.error("DSUL-type-mismatch", "fetch requires a url", path)
            return None
        url = self.expression(body["url"], f"{path}/url")
        method = body.get("method", "GET")
        if isinstance(method, str) and method.upper() in FETCH_METHODS:
            method = method.upper()
        else:
            ctx.error("DSUL-type-mismatch", f"method must be one of {', '.join(FETCH_METHODS)}", f"{path}/method")
            method = "GET"
        headers: list[tuple[str, Expression]] = []
        raw = body.get("headers", _MISSING)
        if raw is not _MISSING:
            if not isinstance(raw, dict):
                ctx.error("DSUL-type-mismatch", "headers must be a map", f"{path}/headers")
            else:
                for key in sorted(raw):
                    expr = self.expression(raw[key], f"{path}/headers/{key}")
                    if expr is not None:
                        headers.append((key, expr))
        payload = None
        if "body" in body:
            payload = self.expression(body["body"], f"{path}/body")
        into = None
        if "into" in body:
            into = self._write_path(body["into"], f"{path}/into")
        self._extensions(body, ("url", "method", "headers", "body", "into"), path, strict=True)
        if url is None:
            return None
        return Fetch(url=url, method=method, headers=tuple(headers), body=payload, into=into)

    def _custom(self, body: Value, path: str) -> Optional[Custom]:
        ctx = self.ctx
        if not isinstance(body, dict):
            ctx.error("DSUL-type-mismatch", "custom takes a map with function, args, into", path)
            return None
        function = body.get("function")
        if not isinstance(function, str) or not is_event_name(function):
            ctx.error("DSUL-function-name-invalid", f"{function!r} is not a valid function name", f"{path}/function")
            function = None
        arguments = self._named_arguments(body.get("args", _MISSING), f"{path}/args")
        into = None
        if "into" in body:
            into = self._write_path(body["into"], f"{path}/into")
        self._extensions(body, ("function", "args", "into"), path, strict=True)
        if function is None:
            return None
        return Custom(function=function, arguments=arguments, into=into)

    def _call(self, keyword: str, body: Value, path: str) -> Optional[CallAutomation]:
        ctx = self.ctx
        parts = keyword.split(".")
        if not (1 <= len(parts) <= 2 and all(is_slug(p) for p in parts)):
            ctx.error("DSUL-unknown-instruction", f"{keyword!r} is neither an instruction keyword nor a call target", path)
            return None
        inner = f"{path}/{keyword}"
        if body is None:
            body = {}
        if not isinstance(body, dict):
            ctx.error("DSUL-type-mismatch", "call arguments must be a map", inner)
            return None
        into = None
        if "into" in body:
            into = self._write_path(body["into"], f"{inner}/into")
        arguments = self._named_arguments(
            {k: v for k, v in body.items() if k != "into"}, inner
        )
        return CallAutomation(target=keyword, arguments=arguments, into=into)

    def _named_arguments(self, data: Value, path: str) -> tuple[tuple[str, Expression], ...]:
        if data is _MISSING or data is None:
            return ()
        if not isinstance(data, dict):
            self.ctx.error("DSUL-type-mismatch", "arguments must be a map", path)
            return ()
        out = []
        for key in sorted(data):
            if not _IDENT_RE.match(key) or key == "into":
                self.ctx.error("DSUL-slug-invalid", f"argument name {key!r} is not a valid identifier", f"{path}/{key}")
                continue
            expr = self.expression(data[key], f"{path}/{key}")
            if expr is not None:
                out.append((key, expr))
        return tuple(out)

    # ------------------------------------------------------ expressions

    def expression(self, data: Value, path: str) -> Optional[Expression]:
        ctx = self.ctx
        if isinstance(data, dict):
            return self._map_expression(data, path)
        if isinstance(data, list):
            items = []
            for i, item in enumerate(data):
                expr = self.expression(item, f"{path}/{i}")
                if expr is None:
                    return None
                items.append(expr)
            return ListExpr(items=tuple(items))
        if isinstance(data, str) and is_template_text(data):
            return self._template(data, path)
        if isinstance(data, float) and (data != data or data in (float("inf"), float("-inf"))):
            ctx.error("DSUL-expression-invalid", "numbers must be finite", path)
            return None
        return Literal(value=data)

    def _map_expression(self, data: dict, path: str) -> Optional[Expression]:
        ctx = self.ctx
        if "var" in data:
            if set(data) != {"var"}:
                ctx.error("DSUL-expression-invalid", "a var expression takes nothing else", path)
                return None
            target = self._read_path(data["var"], f"{path}/var")
            return VarRef(path=target) if target else None
        if "exists" in data:
            if set(data) != {"exists"}:
                ctx.error("DSUL-expression-invalid", "an exists expression takes nothing else", path)
                return None
            target = self._read_path(data["exists"], f"{path}/exists")
            return Exists(path=target) if target else None
        if "lit" in data:
            if set(data) != {"lit"}:
                ctx.error("DSUL-expression-invalid", "a lit escape takes nothing else", path)
                return None
            return Literal(value=self._plain_value(data["lit"], f"{path}/lit"))
        if "op" in data:
            return self._operator(data, path)
        entries = []
        for key in sorted(data):
            expr = self.expression(data[key], f"{path}/{key}")
            if expr is None:
                return None
            entries.append((key, expr))
        return MapExpr(entries=tuple(entries))

    def _operator(self, data: dict, path: str) -> Optional[Expression]:
        ctx = self.ctx
        op = data["op"]
        if not isinstance(op, str):
            ctx.error("DSUL-expression-invalid", "op must be text", f"{path}/op")
            return None
        if op in COMPARE_OPS:
            if set(data) != {"op", "lhs", "rhs"}:
                ctx.error("DSUL-expression-invalid", "a comparison is exactly {op, lhs, rhs}", path)
                return None
            lhs = self.expression(data["lhs"], f"{path}/lhs")
            rhs = self.expression(data["rhs"], f"{path}/rhs")
            if lhs is None or rhs is None:
                return None
            return Compare(op=op, lhs=lhs, rhs=rhs)
        if op in LOGIC_OPS:
            if set(data) != {"op", "operands"}:
                ctx.error("DSUL-expression-invalid", "a logic expression is exactly {op, operands}", path)
                return None
            raw = data["operands"]
            if not isinstance(raw, list) or not raw:
                ctx.error("DSUL-expression-invalid", "operands must be a non-empty list", f"{path}/operands")
                return None
            if op == "not" and len(raw) != 1:
                ctx.error("DSUL-expression-invalid", "not takes exactly one operand", f"{path}/operands")
                return None
            operands = []
            for i, item in enumerate(raw):
                expr = self.expression(item, f"{path}/operands/{i}")
                if expr is None:
                    return None
                operands.append(expr)
            return Logic(op=op, operands=tuple(operands))
        ctx.error("DSUL-unknown-operator", f"operator {op!r} is not defined", f"{path}/op")
        return None

    def _template(self, text: str, path: str) -> Optional[Template]:
        ctx = self.ctx
        parts: list = []
        normalized: list[str] = []
        pos = 0
        ok = True
        for match in TEMPLATE_HOLE_RE.finditer(text):
            parts.append(text[pos : match.start()])
            normalized.append(text[pos : match.start()])
            hole = match.group(1)
            parsed = parse_var_path(hole)
            if parsed is None:
                ctx.error("DSUL-template-invalid", f"template hole {hole!r} is not a variable path", path)
                ok = False
            else:
                parts.append(parsed)
                normalized.append("{{" + parsed.render() + "}}")
            pos = match.end()
        parts.append(text[pos:])
        normalized.append(text[pos:])
        if not ok:
            return None
        return Template(text="".join(normalized), parts=tuple(parts))

    # --------------------------------------------------------- helpers

    def _slug_field(self, data: dict, key: str, path: str, required: bool = False) -> Optional[str]:
        raw = data.get(key, _MISSING)
        where = f"{path}/{key}"
        if raw is _MISSING:
            if required:
                self.ctx.error("DSUL-type-mismatch", f"missing required key {key!r}", path)
            return None
        if not isinstance(raw, str) or not is_slug(raw):
            self.ctx.error("DSUL-slug-invalid", f"{raw!r} is not a valid slug (lowercase letters, digits, inner hyphens, max 63)", where)
            return None
        return raw

    def _text_field(self, data: dict, key: str, path: str) -> Optional[str]:
        raw = data.get(key, _MISSING)
        if raw is _MISSING:
            return None
        if not isinstance(raw, str):
            self.ctx.error("DSUL-type-mismatch", f"{key} must be text", f"{path}/{key}")
            return None
        return raw

    def _bool_field(self, data: dict, key: str, path: str) -> bool:
        raw = data.get(key, _MISSING)
        if raw is _MISSING:
            return False
        if not isinstance(raw, bool):
            self.ctx.error("DSUL-type-mismatch", f"{key} must be a boolean", f"{path}/{key}")
            return False
        return raw

    def _value_map(self, data: Value, path: str, what: str) -> dict:
        if data is _MISSING or data is None:
            return {}
        if not isinstance(data, dict):
            self.ctx.error("DSUL-type-mismatch", f"{what} must be a map", path)
            return {}
        return {key: self._plain_value(val, f"{path}/{key}") for key, val in data.items()}

    def _plain_value(self, data: Value, path: str) -> Value:
        if isinstance(data, float) and (data != data or data in (float("inf"), float("-inf"))):
            self.ctx.error("DSUL-type-mismatch", "numbers must be finite", path)
            return None
        if isinstance(data, list):
            return [self._plain_value(v, f"{path}/{i}") for i, v in enumerate(data)]
        if isinstance(data, dict):
            return {k: self._plain_value(v, f"{path}/{k}") for k, v in data.items()}
        return data

    def _extensions(self, data: dict, known: tuple, path: str, strict: bool = False) -> dict:
        out: dict[str, Value] = {}
        for key in data:
            if key in known:
                continue
            where = f"{path}/{key}" if path else f"/{key}"
            if strict:
                self.ctx.error("DSUL-unknown-key", f"unknown key {key!r} here", where)
            else:
                self.ctx.warn("DSUL-unknown-key", f"unknown key {key!r} preserved as an extension", where)
                out[key] = self._plain_value(data[key], where)
        return out
