"""Scripted conversations against a running engine, for tests and demos."""

from __future__ import annotations

import queue
import time
from typing import Optional

from ..runtime import RuntimeService


class DialogTimeout(AssertionError):
    pass


def run_dialog(
    runtime: RuntimeService,
    workspace_id: str,
    session_id: str,
    turns: list[str],
    *,
    channel: str = "webchat",
    user_event: str = "user.msg",
    bot_event: str = "bot.msg",
    timeout: float = 5.0,
) -> tuple[Optional[str], list[tuple[str, str]]]:
    """Play the user turns one at a time, waiting for exactly one bot reply
    to each. Returns (greeting, [(user text, bot text), ...]). The greeting
    is whatever the bot says on session start, None if it stays quiet."""
    replay, live, detach = runtime.subscribe_session(workspace_id, session_id, channel=channel)
    try:
        for _, envelope in replay:
            if envelope.type == bot_event:
                raise AssertionError("dialog must start on a fresh session")
        greeting = _next_bot(live, bot_event, min(timeout, 2.0), required=False)
        transcript = []
        for text in turns:
            runtime.ingest(
                workspace_id, user_event, {"text": text}, session_id=session_id, channel=channel
            )
            reply = _next_bot(live, bot_event, timeout, required=True)
            transcript.append((text, reply))
        return greeting, transcript
    finally:
        detach()


def _next_bot(live: queue.Queue, bot_event: str, timeout: float, required: bool) -> Optional[str]:
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            if required:
                raise DialogTimeout(f"no {bot_event} within {timeout}s")
            return None
        try:
            _, envelope = live.get(timeout=remaining)
        except queue.Empty:
            continue
        if envelope.type == bot_event:
            payload = envelope.payload
            if isinstance(payload, dict) and isinstance(payload.get("text"), str):
                return payload["text"]
            return None
