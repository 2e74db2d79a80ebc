"""Durable session and global scopes: one JSON file per scope instance.

With no root directory the store is memory-only, which is what unit tests
and the benchmark want. File names embed a hash of the raw key so hostile
session ids cannot escape the directory or collide after sanitizing.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from pathlib import Path
from typing import Optional

log = logging.getLogger("dsul.store")

_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def _safe_stem(raw: str) -> str:
    digest = hashlib.sha256(raw.encode("utf-8")).hexdigest()[:12]
    stem = _UNSAFE.sub("_", raw)[:48] or "x"
    return f"{stem}-{digest}"


class ScopeStore:
    def __init__(self, root: Optional[str | Path] = None):
        self.root = Path(root) if root is not None else None
        self._lock = threading.Lock()
        self._cache: dict[tuple, dict] = {}

    # Scopes are identified by (workspace, kind, key): kind is "session"
    # or "global", key the session id or the dotted install path.

    def load(self, workspace_id: str, kind: str, key: str) -> dict:
        """The live dict for one scope; the same object every time."""
        ident = (workspace_id, kind, key)
        with self._lock:
            if ident in self._cache:
                return self._cache[ident]
            data = self._read(ident)
            self._cache[ident] = data
            return data

    def flush(self, workspace_id: str, kind: str, key: str) -> None:
        if self.root is None:
            return
        ident = (workspace_id, kind, key)
        with self._lock:
            data = self._cache.get(ident)
            if data is None:
                return
            path = self._path(ident)
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(json.dumps(data, sort_keys=True, ensure_ascii=False), encoding="utf-8")
                os.replace(tmp, path)
            except OSError:
                log.exception("cannot persist %s/%s/%s", workspace_id, kind, key)
            except (TypeError, ValueError):
                log.exception("scope %s/%s/%s holds non-JSON data; not persisted", workspace_id, kind, key)

    def drop(self, workspace_id: str, kind: str, key: str) -> None:
        ident = (workspace_id, kind, key)
        with self._lock:
            self._cache.pop(ident, None)
            if self.root is None:
                return
            try:
                self._path(ident).unlink(missing_ok=True)
            except OSError:
                log.exception("cannot drop %s/%s/%s", workspace_id, kind, key)

    def _read(self, ident: tuple) -> dict:
        if self.root is None:
            return {}
        path = self._path(ident)
        if not path.is_file():
            return {}
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            log.exception("cannot read %s; starting empty", path)
            return {}
        return data if isinstance(data, dict) else {}

    def _path(self, ident: tuple) -> Path:
        workspace_id, kind, key = ident
        assert self.root is not None
        return self.root / _safe_stem(workspace_id) / kind / (_safe_stem(key) + ".json")
