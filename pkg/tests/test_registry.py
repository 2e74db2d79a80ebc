"""Registry behavior: publish, dense versioning, and tamper detection.

A published version must be immutable in the strong sense: loading it
returns byte-identical text no matter what is published afterwards, and
any edit to the stored files is reported as tampering, never silently
accepted.
"""

import re
import shutil
import threading

import pytest
import yaml

from dsul.canonical import canonical_serialize, content_hash, render_yaml
from dsul.errors import RegistryIO, TamperDetected, UnknownApp, UnknownVersion, ValidationFailed
from dsul.registry import MANIFEST_FILE, WORKSPACE_FILE, Registry

from conftest import parse_ok

UTIL_APP = """\
slug: util-app
name: Utilities
automations:
  - slug: shout
    name: Shout
    arguments:
      text:
        type: string
        required: true
    do:
      - set:
          name: run.result
          value: "{{ arguments.text }}!"
    output: {var: run.result}
"""

UTIL_APP_V2 = UTIL_APP.replace('"{{ arguments.text }}!"', '"{{ arguments.text }}!!"')


def publish_util(registry, text=UTIL_APP):
    return registry.publish(parse_ok(text))


def rewrite_manifest(version_dir, **changes):
    """Edit manifest fields in place, keeping the file well formed."""
    path = version_dir / MANIFEST_FILE
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    data.update(changes)
    path.write_text(render_yaml(data), encoding="utf-8")


class TestPublish:
    def test_first_publish_is_version_one(self, registry):
        manifest = publish_util(registry)
        assert manifest.app == "util-app"
        assert manifest.version == 1
        assert registry.apps() == ["util-app"]
        assert registry.versions("util-app") == [1]
        assert registry.latest("util-app") == 1

    def test_stored_text_is_canonical_and_hash_matches(self, registry):
        manifest = publish_util(registry)
        version_dir = registry.root / "util-app" / "1"
        stored = (version_dir / WORKSPACE_FILE).read_text(encoding="utf-8")
        assert stored == canonical_serialize(parse_ok(UTIL_APP))
        assert content_hash(stored) == manifest.content_hash
        assert re.fullmatch(r"[0-9a-f]{64}", manifest.content_hash)

    def test_manifest_file_round_trips(self, registry):
        manifest = publish_util(registry)
        data = yaml.safe_load((registry.root / "util-app" / "1" / MANIFEST_FILE).read_text())
        assert data == {
            "app": "util-app",
            "version": 1,
            "createdAt": manifest.created_at,
            "contentHash": manifest.content_hash,
        }

    def test_republish_appends_the_next_version(self, registry):
        publish_util(registry)
        manifest = publish_util(registry, UTIL_APP_V2)
        assert manifest.version == 2
        assert registry.versions("util-app") == [1, 2]
        assert registry.latest("util-app") == 2

    def test_validation_errors_block_publish(self, registry):
        text = """\
slug: dup-app
automations:
  - slug: twice
    trigger: {events: ["a.b"]}
    do: []
  - slug: twice
    trigger: {events: ["c.d"]}
    do: []
"""
        with pytest.raises(ValidationFailed):
            registry.publish(parse_ok(text))
        # Nothing was written, not even the app directory.
        assert registry.apps() == []

    def test_warnings_do_not_block_publish(self, registry):
        text = """\
slug: noisy-app
automations:
  - slug: only-emits
    trigger: {events: ["go.now"]}
    do:
      - emit: "nobody.listens"
"""
        manifest = registry.publish(parse_ok(text))
        assert manifest.version == 1

    def test_concurrent_publishers_get_distinct_dense_versions(self, registry):
        seen = []
        errors = []

        def worker():
            try:
                seen.append(publish_util(registry).version)
            except Exception as exc:  # pragma: no cover - failure detail
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        assert sorted(seen) == [1, 2, 3, 4, 5, 6]
        assert registry.versions("util-app") == [1, 2, 3, 4, 5, 6]


class TestRead:
    def test_load_round_trips_the_workspace(self, registry):
        publish_util(registry)
        published = registry.load("util-app", 1)
        assert published.workspace == parse_ok(UTIL_APP)
        assert published.manifest.version == 1
        assert published.text == canonical_serialize(published.workspace)

    def test_load_latest(self, registry):
        publish_util(registry)
        publish_util(registry, UTIL_APP_V2)
        assert registry.load("util-app", "latest").manifest.version == 2

    def test_unknown_app(self, registry):
        with pytest.raises(UnknownApp):
            registry.versions("ghost")
        with pytest.raises(UnknownApp):
            registry.load("ghost", 1)

    def test_unknown_version(self, registry):
        publish_util(registry)
        with pytest.raises(UnknownVersion):
            registry.load("util-app", 2)

    @pytest.mark.parametrize("version", [0, -1, "2", 1.5, None])
    def test_malformed_version_values(self, registry, version):
        publish_util(registry)
        with pytest.raises(UnknownVersion):
            registry.load("util-app", version)

    def test_apps_ignores_stray_files_and_non_slug_directories(self, registry):
        publish_util(registry)
        (registry.root / "README.txt").write_text("not an app")
        (registry.root / "Not_A_Slug").mkdir()
        assert registry.apps() == ["util-app"]

    def test_versions_ignores_non_numeric_directories(self, registry):
        publish_util(registry)
        (registry.root / "util-app" / "notes").mkdir()
        assert registry.versions("util-app") == [1]

    def test_missing_version_breaks_density(self, registry):
        publish_util(registry)
        publish_util(registry, UTIL_APP_V2)
        shutil.rmtree(registry.root / "util-app" / "1")
        with pytest.raises(RegistryIO, match="not dense"):
            registry.versions("util-app")


class TestImmutability:
    def test_pinned_version_is_byte_identical_across_later_publishes(self, registry):
        publish_util(registry)
        before = registry.load("util-app", 1)
        publish_util(registry, UTIL_APP_V2)
        after = registry.load("util-app", 1)
        assert after.text == before.text
        assert after.manifest == before.manifest
        assert after.workspace == before.workspace
        # The new version really is different content.
        assert registry.load("util-app", 2).text != before.text

    def test_fresh_registry_handle_sees_identical_bytes(self, registry):
        publish_util(registry)
        text = registry.load("util-app", 1).text
        publish_util(registry, UTIL_APP_V2)
        assert Registry(registry.root).load("util-app", 1).text == text


class TestTamper:
    def tampered_dir(self, registry):
        publish_util(registry)
        return registry.root / "util-app" / "1"

    def test_edited_workspace_bytes_are_detected(self, registry):
        version_dir = self.tampered_dir(registry)
        path = version_dir / WORKSPACE_FILE
        path.write_text(path.read_text().replace("Shout", "Shout louder"), encoding="utf-8")
        with pytest.raises(TamperDetected, match="recorded hash"):
            registry.load("util-app", 1)

    def test_truncated_workspace_is_detected(self, registry):
        version_dir = self.tampered_dir(registry)
        path = version_dir / WORKSPACE_FILE
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TamperDetected):
            registry.load("util-app", 1)

    def test_manifest_naming_mismatch_is_detected(self, registry):
        version_dir = self.tampered_dir(registry)
        rewrite_manifest(version_dir, version=7)
        with pytest.raises(TamperDetected, match="manifest names"):
            registry.load("util-app", 1)

    def test_unparseable_replacement_is_detected_even_with_matching_hash(self, registry):
        version_dir = self.tampered_dir(registry)
        broken = 'slug: "unterminated\n'
        (version_dir / WORKSPACE_FILE).write_text(broken, encoding="utf-8")
        rewrite_manifest(version_dir, contentHash=content_hash(broken))
        with pytest.raises(TamperDetected, match="no longer parses"):
            registry.load("util-app", 1)

    def test_non_canonical_replacement_is_detected_even_with_matching_hash(self, registry):
        version_dir = self.tampered_dir(registry)
        path = version_dir / WORKSPACE_FILE
        padded = path.read_text(encoding="utf-8") + "# a harmless-looking comment\n"
        path.write_text(padded, encoding="utf-8")
        rewrite_manifest(version_dir, contentHash=content_hash(padded))
        with pytest.raises(TamperDetected, match="not canonical"):
            registry.load("util-app", 1)

    def test_manifest_garbage_is_detected(self, registry):
        version_dir = self.tampered_dir(registry)
        (version_dir / MANIFEST_FILE).write_text("app: [unclosed", encoding="utf-8")
        with pytest.raises(TamperDetected):
            registry.load("util-app", 1)

    def test_manifest_non_map_is_detected(self, registry):
        version_dir = self.tampered_dir(registry)
        (version_dir / MANIFEST_FILE).write_text('- "a list"\n', encoding="utf-8")
        with pytest.raises(TamperDetected, match="must be a map"):
            registry.load("util-app", 1)

    def test_manifest_missing_fields_is_detected(self, registry):
        version_dir = self.tampered_dir(registry)
        (version_dir / MANIFEST_FILE).write_text('app: "util-app"\nversion: 1\n', encoding="utf-8")
        with pytest.raises(TamperDetected, match="missing fields"):
            registry.load("util-app", 1)
