"""Host functions the fixture workspaces call.

These are deliberately small and deterministic: keyword rules, not models.
The point is that the dialog flows exercise the engine, not that the
language understanding is any good.
"""

from __future__ import annotations

import math
import re
import time
from typing import Optional

from ..interpreter import HostFunctionRegistry

_CONFIRM_WORDS = {"yes", "yep", "sure", "confirm", "ok", "okay"}
_BOOK_WORDS = {"book", "reserve", "reservation", "table"}
_GREETING_WORDS = {"hello", "hi", "hey"}
_DATE_WORDS = {"today", "tomorrow"}

_PARTY_RE = re.compile(r"(\d+)\s*(?:people|persons|guests)")
_CLOCK_RE = re.compile(r"\b(\d{1,2}):(\d{2})\b")
_AMPM_RE = re.compile(r"\b(\d{1,2})\s*(am|pm)\b")

# The restaurant takes bookings on the half hour between these.
OPEN_MINUTE = 18 * 60
CLOSE_MINUTE = 22 * 60
DEFAULT_SLOT = "19:00"


def detect_intent(args: dict) -> dict:
    """Rule-based intent tagging. Order matters: an explicit head count
    wins over booking keywords, a confirmation wins over everything."""
    text = args.get("text")
    lower = text.lower() if isinstance(text, str) else ""
    words = set(re.findall(r"[a-z0-9']+", lower))

    if words & _CONFIRM_WORDS:
        return {"intent": "confirm", "entities": {}}

    party = _PARTY_RE.search(lower)
    if party:
        return {"intent": "party-size", "entities": {"count": int(party.group(1))}}

    if words & _BOOK_WORDS:
        entities: dict = {}
        for word in _DATE_WORDS:
            if word in words:
                entities["date"] = word
                break
        slot = _extract_time(lower)
        if slot is not None:
            entities["time"] = slot
        return {"intent": "book-table", "entities": entities}

    if words & _GREETING_WORDS:
        return {"intent": "greeting", "entities": {}}

    return {"intent": "unknown", "entities": {}}


def _extract_time(lower: str) -> Optional[str]:
    clock = _CLOCK_RE.search(lower)
    if clock:
        return f"{int(clock.group(1)):02d}:{int(clock.group(2)):02d}"
    ampm = _AMPM_RE.search(lower)
    if ampm:
        hour = int(ampm.group(1)) % 12
        if ampm.group(2) == "pm":
            hour += 12
        return f"{hour:02d}:00"
    return None


def next_timeslot(args: dict) -> str:
    """Snap a requested time up to the next bookable half hour. Anything
    outside opening hours, or nothing at all, lands on the default slot."""
    raw = args.get("time")
    if not isinstance(raw, str):
        return DEFAULT_SLOT
    match = re.match(r"^(\d{1,2}):(\d{2})$", raw)
    if not match:
        return DEFAULT_SLOT
    minute = int(match.group(1)) * 60 + int(match.group(2))
    snapped = math.ceil(minute / 30) * 30
    if snapped < OPEN_MINUTE or snapped > CLOSE_MINUTE:
        return DEFAULT_SLOT
    return f"{snapped // 60:02d}:{snapped % 60:02d}"


def bench_delay(args: dict) -> dict:
    """Sleep the requested number of milliseconds; the timing control."""
    ms = args.get("ms")
    if not isinstance(ms, (int, float)) or ms < 0:
        ms = 0
    time.sleep(ms / 1000.0)
    return {"sleptMs": ms}


def make_sms_send(log: list):
    """A recording stand-in for a text message provider."""

    def sms_send(args: dict) -> dict:
        log.append({"to": args.get("to"), "text": args.get("text")})
        return {"sent": True}

    return sms_send


def make_lm_train(log: list):
    """Collects confirmed dialog examples. A real deployment would feed
    these back into model training; here we only record them."""

    def lm_train(args: dict) -> dict:
        log.append(args.get("example"))
        return {"queued": len(log)}

    return lm_train


# The one document the OCR stand-in can actually read.
OCR_URI = "doc://letter-1"
OCR_TEXT = "Dear customer, your January invoice is attached. Total due: 120.00 EUR."


def ocr_extract(args: dict) -> dict:
    uri = args.get("uri")
    if uri == OCR_URI:
        return {"text": OCR_TEXT, "confidence": 0.98}
    return {"text": "", "confidence": 0.0}


class FixtureLogs:
    """The side effects the mock services record, one list per service."""

    def __init__(self):
        self.sms: list = []
        self.training: list = []


def register_fixture_functions(registry: HostFunctionRegistry, sms_log: Optional[list] = None) -> FixtureLogs:
    """Install everything the fixture workspaces reference. Returns the
    logs the recording mocks write into."""
    logs = FixtureLogs()
    if sms_log is not None:
        logs.sms = sms_log
    registry.register("intent.detect", detect_intent)
    registry.register("timeslot.next", next_timeslot)
    registry.register("bench.delay", bench_delay)
    registry.register("sms.send", make_sms_send(logs.sms))
    registry.register("lm.train", make_lm_train(logs.training))
    registry.register("ocr.extract", ocr_extract)
    return logs
