"""App registry: published workspace versions, immutable once written.

Layout on disk, one directory per version:

    <root>/<appSlug>/<version>/workspace.yaml   canonical form, hashed
    <root>/<appSlug>/<version>/manifest.yaml    app, version, createdAt, contentHash

Versions are dense (1..N); publishing appends N+1 under a per-app file
lock so concurrent publishers cannot race to the same number. Loading
verifies the hash and re-renders the canonical form: any byte drift in a
stored version is reported as tampering, never silently accepted.
"""
from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from .canonical import canonical_serialize, content_hash, render_yaml
from .errors import RegistryIO, TamperDetected, UnknownApp, UnknownVersion, ValidationFailed
from .model import AppManifest, LATEST, Workspace, is_slug
from .parser import parse_workspace
from .validate import validate_workspace

WORKSPACE_FILE = "workspace.yaml"
MANIFEST_FILE = "manifest.yaml"


@dataclass(frozen=True)
class PublishedApp:
    manifest: AppManifest
    workspace: Workspace
    text: str


class Registry:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------ write

    def publish(self, workspace: Workspace) -> AppManifest:
        """Store the canonical form of workspace as the next version of the
        app named by its slug. The file must validate cleanly first."""
        app = workspace.slug
        diags = validate_workspace(workspace)
        errors = [d for d in diags if d.severity == "error"]
        if errors:
            raise ValidationFailed(f"cannot publish {app!r}: {len(errors)} validation error(s)", errors)
        app_dir = self.root / app
        app_dir.mkdir(parents=True, exist_ok=True)
        with FileLock(str(app_dir / ".lock")):
            version = self._latest_version(app, missing_ok=True) + 1
            text = canonical_serialize(workspace)
            manifest = AppManifest(
                app=app,
                version=version,
                created_at=_now_iso(),
                content_hash=content_hash(text),
            )
            version_dir = app_dir / str(version)
            try:
                version_dir.mkdir()
                (version_dir / WORKSPACE_FILE).write_text(text, encoding="utf-8")
                (version_dir / MANIFEST_FILE).write_text(_manifest_text(manifest), encoding="utf-8")
            except OSError as exc:
                raise RegistryIO(f"cannot write {version_dir}: {exc}") from exc
        return manifest

    # ------------------------------------------------------------- read

    def apps(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if p.is_dir() and is_slug(p.name))

    def versions(self, app: str) -> list[int]:
        app_dir = self.root / app
        if not app_dir.is_dir():
            raise UnknownApp(f"no app named {app!r} in the registry")
        found = sorted(int(p.name) for p in app_dir.iterdir() if p.is_dir() and p.name.isdigit())
        for expected, got in enumerate(found, start=1):
            if expected != got:
                raise RegistryIO(f"{app!r} versions are not dense: missing {expected}")
        return found

    def latest(self, app: str) -> int:
        versions = self.versions(app)
        if not versions:
            raise UnknownVersion(f"{app!r} has no published versions")
        return versions[-1]

    def load(self, app: str, version: int | str) -> PublishedApp:
        """Read one published version, verifying hash and canonical form."""
        if version == LATEST:
            version = self.latest(app)
        if not isinstance(version, int) or version < 1:
            raise UnknownVersion(f"bad version {version!r} for {app!r}")
        version_dir = self.root / app / str(version)
        if not version_dir.is_dir():
            if not (self.root / app).is_dir():
                raise UnknownApp(f"no app named {app!r} in the registry")
            raise UnknownVersion(f"{app!r} has no version {version}")
        manifest = self._read_manifest(version_dir)
        if manifest.app != app or manifest.version != version:
            raise TamperDetected(f"{version_dir}: manifest names {manifest.app!r} v{manifest.version}, not {app!r} v{version}")
        try:
            raw = (version_dir / WORKSPACE_FILE).read_bytes()
        except OSError as exc:
            raise RegistryIO(f"cannot read {version_dir / WORKSPACE_FILE}: {exc}") from exc
        if content_hash(raw) != manifest.content_hash:
            raise TamperDetected(f"{app!r} v{version}: stored bytes do not match the recorded hash")
        text = raw.decode("utf-8")
        result = parse_workspace(text, str(version_dir / WORKSPACE_FILE))
        if not result.ok:
            raise TamperDetected(f"{app!r} v{version}: stored form no longer parses")
        if canonical_serialize(result.workspace) != text:
            raise TamperDetected(f"{app!r} v{version}: stored form is not canonical")
        return PublishedApp(manifest=manifest, workspace=result.workspace, text=text)

    def _latest_version(self, app: str, missing_ok: bool = False) -> int:
        try:
            versions = self.versions(app)
        except UnknownApp:
            if missing_ok:
                return 0
            raise
        return versions[-1] if versions else 0

    def _read_manifest(self, version_dir: Path) -> AppManifest:
        import yaml

        path = version_dir / MANIFEST_FILE
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise RegistryIO(f"cannot read {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise TamperDetected(f"{path}: manifest is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise TamperDetected(f"{path}: manifest must be a map")
        try:
            return AppManifest(
                app=str(data["app"]),
                version=int(data["version"]),
                created_at=str(data["createdAt"]),
                content_hash=str(data["contentHash"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TamperDetected(f"{path}: manifest is missing fields: {exc}") from exc


def _manifest_text(manifest: AppManifest) -> str:
    return render_yaml(
        {
            "app": manifest.app,
            "version": manifest.version,
            "createdAt": manifest.created_at,
            "contentHash": manifest.content_hash,
        }
    )


def _now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
