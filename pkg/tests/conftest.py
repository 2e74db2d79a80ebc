"""Shared fixtures: parse helpers, a scratch registry, and runtime factories."""

import pytest

from dsul.broker import MemoryBroker
from dsul.parser import parse_workspace
from dsul.registry import Registry
from dsul.runtime import RuntimeService


def parse_ok(text: str, file_name: str = "<test>"):
    """Parse text that is expected to be a valid workspace, or fail loudly."""
    result = parse_workspace(text, file_name)
    if result.workspace is None:
        rendered = "\n".join(d.render() for d in result.diagnostics)
        raise AssertionError(f"expected a valid workspace, got:\n{rendered}")
    return result.workspace


@pytest.fixture
def registry(tmp_path):
    return Registry(tmp_path / "registry")


@pytest.fixture
def runtime():
    """An in-memory runtime with no registry; closed after the test."""
    svc = RuntimeService(broker=MemoryBroker())
    yield svc
    svc.close()


@pytest.fixture
def runtime_with_registry(registry):
    svc = RuntimeService(broker=MemoryBroker(), registry=registry)
    yield svc, registry
    svc.close()
