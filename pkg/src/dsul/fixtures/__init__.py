"""Ready-made workspaces, host functions, and mocks for tests and demos."""

from __future__ import annotations

import dataclasses
from importlib import resources

from ..model import Workspace
from ..parser import parse_workspace
from ..registry import Registry
from .dialog import run_dialog
from .hostfns import OCR_TEXT, OCR_URI, FixtureLogs, register_fixture_functions
from .mocks import MockHttpServer, booking_responder

__all__ = [
    "FixtureLogs",
    "MockHttpServer",
    "OCR_TEXT",
    "OCR_URI",
    "booking_responder",
    "chatbot_workspace",
    "fixture_text",
    "fixture_workspace",
    "publish_chatbot_services",
    "publish_document_suite",
    "register_fixture_functions",
    "run_dialog",
]

FIXTURE_NAMES = (
    "echo",
    "echo-delay",
    "chatbot",
    "sms-app",
    "intent-app",
    "trainer-app",
    "ocr-app",
    "mail-app",
    "doc-portal",
)


def fixture_text(name: str) -> str:
    return resources.files(__name__).joinpath("data", f"{name}.yaml").read_text("utf-8")


def fixture_workspace(name: str) -> Workspace:
    result = parse_workspace(fixture_text(name), f"{name}.yaml")
    if result.workspace is None:
        details = "; ".join(str(d) for d in result.diagnostics)
        raise AssertionError(f"fixture {name} does not parse: {details}")
    return result.workspace


def chatbot_workspace(booking_url: str | None = None) -> Workspace:
    """The booking chatbot, with its service URL pointed wherever the test
    wants (a MockHttpServer, usually)."""
    ws = fixture_workspace("chatbot")
    if booking_url is None:
        return ws
    return dataclasses.replace(ws, config={**ws.config, "booking-url": booking_url})


def publish_chatbot_services(registry: Registry) -> None:
    """Publish the three apps the chatbot imports: messaging, intent
    tagging, and trainer collection."""
    registry.publish(fixture_workspace("sms-app"))
    registry.publish(fixture_workspace("intent-app"))
    registry.publish(fixture_workspace("trainer-app"))


def publish_document_suite(registry: Registry) -> Workspace:
    """Publish the recognition app, then the mail room that imports it, and
    return the portal workspace that imports the mail room."""
    registry.publish(fixture_workspace("ocr-app"))
    registry.publish(fixture_workspace("mail-app"))
    return fixture_workspace("doc-portal")
