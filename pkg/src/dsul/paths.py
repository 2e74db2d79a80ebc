"""Variable paths: dotted references into the execution scopes.

A path is a scope name (run, session, global, config, arguments) followed by
one or more segments; a bare path with no scope prefix defaults to run.
Segments are words of letters, digits, underscore, or hyphen; an all-digit
segment indexes into a list when the container at that point is a list.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

SCOPES = ("run", "session", "global", "config", "arguments")
WRITABLE_SCOPES = ("run", "session", "global")

_SEGMENT_RE = re.compile(r"^[A-Za-z0-9_-]+$")


@dataclass(frozen=True)
class VarPath:
    scope: str
    segments: tuple[str, ...]

    def render(self) -> str:
        return ".".join((self.scope,) + self.segments)

    @property
    def writable(self) -> bool:
        return self.scope in WRITABLE_SCOPES


def parse_var_path(text: str) -> VarPath | None:
    """Parse a dotted path; None when malformed.

    A single word that names a scope is rejected: a path always addresses a
    key inside a scope, never a whole scope.
    """
    if not isinstance(text, str) or not text:
        return None
    parts = text.split(".")
    if any(not _SEGMENT_RE.match(p) for p in parts):
        return None
    if parts[0] in SCOPES:
        if len(parts) == 1:
            return None
        return VarPath(parts[0], tuple(parts[1:]))
    return VarPath("run", tuple(parts))


def path_get(root, segments) -> tuple[bool, object]:
    """Resolve segments against nested maps/lists: (found, value)."""
    node = root
    for seg in segments:
        if isinstance(node, dict):
            if seg not in node:
                return False, None
            node = node[seg]
        elif isinstance(node, list) and seg.isdigit():
            idx = int(seg)
            if idx >= len(node):
                return False, None
            node = node[idx]
        else:
            return False, None
    return True, node


def path_set(root: dict, segments, value) -> bool:
    """Write value at segments, creating intermediate maps.

    A non-container intermediate is replaced by a fresh map. Writing into a
    list requires an in-range index (or == len to append) as the final
    segment; otherwise the write is refused and False is returned.
    """
    node = root
    for i, seg in enumerate(segments[:-1]):
        if isinstance(node, list) and seg.isdigit():
            idx = int(seg)
            if idx >= len(node):
                return False
            node = node[idx]
            continue
        if not isinstance(node, dict):
            return False
        nxt = node.get(seg)
        if not isinstance(nxt, (dict, list)):
            nxt = {}
            node[seg] = nxt
        node = nxt
    last = segments[-1]
    if isinstance(node, list):
        if not last.isdigit():
            return False
        idx = int(last)
        if idx < len(node):
            node[idx] = value
        elif idx == len(node):
            node.append(value)
        else:
            return False
        return True
    if not isinstance(node, dict):
        return False
    node[last] = value
    return True


def path_delete(root: dict, segments) -> bool:
    """Remove the key/index at segments; missing paths are a no-op."""
    node = root
    for seg in segments[:-1]:
        if isinstance(node, dict):
            node = node.get(seg)
        elif isinstance(node, list) and seg.isdigit() and int(seg) < len(node):
            node = node[int(seg)]
        else:
            return False
    last = segments[-1]
    if isinstance(node, dict) and last in node:
        del node[last]
        return True
    if isinstance(node, list) and last.isdigit() and int(last) < len(node):
        del node[int(last)]
        return True
    return False
