"""Framed pipe protocol between the engine and a local interpreter worker.

Wire format, bit-exact: a 4-byte big-endian unsigned length followed by that
many bytes of UTF-8 JSON.  Frame objects are flat JSON dicts with a ``type``
field from ``{exec, stdout, stderr, rich, error, done, interrupt}``:

    {"type": "exec", "id": <cell id>, "code": <source>}
    {"type": "stdout", "id": <cell id>, "text": <chunk>}
    {"type": "stderr", "id": <cell id>, "text": <chunk>}
    {"type": "rich",   "id": <cell id>, "mime": <media type>,
     "path": <workdir-relative payload path or null>, "text": <text form>}
    {"type": "error",  "id": <cell id>, "ename": ..., "evalue": ...,
     "traceback": [<line>, ...]}
    {"type": "done",   "id": <cell id>, "status": "ok"|"error"|"interrupted"}
    {"type": "interrupt"}
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

FRAME_TYPES = frozenset({"exec", "stdout", "stderr", "rich", "error", "done", "interrupt"})

_HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 64 * 1024 * 1024


class FrameProtocolError(Exception):
    pass


def encode_frame(frame: dict) -> bytes:
    if frame.get("type") not in FRAME_TYPES:
        raise FrameProtocolError(f"unknown frame type {frame.get('type')!r}")
    body = json.dumps(frame, ensure_ascii=False).encode("utf-8")
    return _HEADER.pack(len(body)) + body


def write_frame(stream: BinaryIO, frame: dict) -> None:
    stream.write(encode_frame(frame))
    stream.flush()


def read_frame(stream: BinaryIO) -> dict | None:
    """Read one frame; None on clean EOF."""

    header = stream.read(_HEADER.size)
    if not header:
        return None
    if len(header) < _HEADER.size:
        raise FrameProtocolError("truncated frame header")
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise FrameProtocolError(f"frame of {length} bytes exceeds limit")
    body = b""
    while len(body) < length:
        chunk = stream.read(length - len(body))
        if not chunk:
            raise FrameProtocolError("truncated frame body")
        body += chunk
    frame = json.loads(body.decode("utf-8"))
    if frame.get("type") not in FRAME_TYPES:
        raise FrameProtocolError(f"unknown frame type {frame.get('type')!r}")
    return frame
