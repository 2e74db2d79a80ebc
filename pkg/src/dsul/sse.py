"""A small server-sent-events reader for clients of the gateway stream.

Only the parts of the wire format the gateway produces: data, id, event
fields, comment lines, and blank-line dispatch. Chunk boundaries fall
wherever the transport cuts them, so the parser buffers until it has a
whole frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional


@dataclass
class SseFrame:
    data: str
    id: Optional[str] = None
    event: Optional[str] = None


def iter_sse_frames(chunks: Iterable[bytes]) -> Iterator[SseFrame]:
    buffer = b""
    for chunk in chunks:
        buffer += chunk
        while b"\n\n" in buffer:
            raw, buffer = buffer.split(b"\n\n", 1)
            frame = _parse_frame(raw.decode("utf-8", "replace"))
            if frame is not None:
                yield frame


def _parse_frame(raw: str) -> Optional[SseFrame]:
    data_lines: list[str] = []
    frame_id: Optional[str] = None
    event: Optional[str] = None
    for line in raw.split("\n"):
        line = line.rstrip("\r")
        if not line or line.startswith(":"):
            continue
        field, _, value = line.partition(":")
        value = value[1:] if value.startswith(" ") else value
        if field == "data":
            data_lines.append(value)
        elif field == "id":
            frame_id = value
        elif field == "event":
            event = value
    if not data_lines and frame_id is None and event is None:
        return None
    return SseFrame(data="\n".join(data_lines), id=frame_id, event=event)


def iter_sse(chunks: Iterable[bytes]) -> Iterator[dict]:
    """Decoded event stream: one dict per frame carrying JSON data. The
    frame id rides along as "seq" when present."""
    for frame in iter_sse_frames(chunks):
        if not frame.data:
            continue
        try:
            message = json.loads(frame.data)
        except ValueError:
            continue
        if isinstance(message, dict):
            if frame.id is not None:
                message.setdefault("seq", int(frame.id) if frame.id.isdigit() else frame.id)
            yield message
