"""Workspace model: the in-memory form of one declarative service file.

Everything below is immutable after parse.  Source locations live in a
side table excluded from equality, so two parses of byte-identical files
compare equal regardless of file name.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

from .diagnostics import Location
from .expressions import Expression
from .instructions import Instruction

# One lowercase word: letters, digits, inner hyphens.  63 chars max.
_SLUG_RE = re.compile(r"^[a-z0-9][a-z0-9-]{0,62}$")

MAX_EVENT_SEGMENTS = 8
RESERVED_EVENT_PREFIX = "runtime."

# Events the runtime itself emits.  The set is closed: workspaces may
# listen to these but never emit anything under the reserved prefix.
NATIVE_EVENTS = frozenset(
    {
        "runtime.workspace.loaded",
        "runtime.automation.added",
        "runtime.app.installed",
        "runtime.run.failed",
        "runtime.run.succeeded",
        "runtime.session.started",
    }
)

BLOCK_KINDS = ("webchat", "form", "rich-text")

ARGUMENT_TYPES = ("any", "string", "number", "boolean", "object", "array")

LATEST = "latest"

MAX_INSTALL_DEPTH = 16


def is_slug(text: str) -> bool:
    return bool(_SLUG_RE.match(text)) and not text.endswith("-")


def is_event_name(text: str) -> bool:
    segments = text.split(".")
    if not 1 <= len(segments) <= MAX_EVENT_SEGMENTS:
        return False
    return all(is_slug(seg) for seg in segments)


def is_native_event(text: str) -> bool:
    return text in NATIVE_EVENTS


def is_reserved_event(text: str) -> bool:
    return text.startswith(RESERVED_EVENT_PREFIX) or text == "runtime"


@dataclass(frozen=True)
class ArgumentSpec:
    type: str = "any"
    required: bool = False


@dataclass(frozen=True)
class Trigger:
    events: tuple[str, ...] = ()
    endpoint: bool = False


@dataclass(frozen=True)
class Automation:
    slug: str
    name: str
    description: Optional[str] = None
    arguments: tuple[tuple[str, ArgumentSpec], ...] = ()
    trigger: Trigger = Trigger()
    body: tuple[Instruction, ...] = ()
    output: Optional[Expression] = None
    private: bool = False
    extensions: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BlockInstance:
    kind: str
    config: dict = field(default_factory=dict)
    # UI event emitted by the block -> workspace event to publish.
    on_event: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Page:
    slug: str
    name: str
    description: Optional[str] = None
    blocks: tuple[BlockInstance, ...] = ()
    extensions: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AppInstall:
    slug: str
    app: str
    version: Union[int, str] = LATEST  # pinned number, or "latest"
    config: dict = field(default_factory=dict)


@dataclass
class SourceInfo:
    """Side table from json path to (line, column), both 1-based."""

    file: str
    locations: dict[str, tuple[int, int]] = field(default_factory=dict)

    def location(self, json_path: str) -> Location:
        # Fall back to the nearest recorded ancestor so every diagnostic
        # points somewhere real even for synthesized paths.
        path = json_path
        while True:
            hit = self.locations.get(path)
            if hit is not None:
                return Location(self.file, hit[0], hit[1], json_path)
            if not path:
                return Location(self.file, 1, 1, json_path)
            path = path.rpartition("/")[0]


@dataclass(frozen=True)
class Workspace:
    slug: str
    name: str
    description: Optional[str] = None
    config: dict = field(default_factory=dict)
    imports: tuple[AppInstall, ...] = ()
    automations: tuple[Automation, ...] = ()
    pages: tuple[Page, ...] = ()
    extensions: dict = field(default_factory=dict)
    source: Optional[SourceInfo] = field(
        default=None, compare=False, repr=False, hash=False
    )

    def automation(self, slug: str) -> Optional[Automation]:
        for auto in self.automations:
            if auto.slug == slug:
                return auto
        return None

    def page(self, slug: str) -> Optional[Page]:
        for page in self.pages:
            if page.slug == slug:
                return page
        return None


@dataclass(frozen=True)
class AppManifest:
    """Registry record for one published, immutable app version."""

    app: str
    version: int
    created_at: str
    content_hash: str
