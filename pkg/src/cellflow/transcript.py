"""Append-only session event log: the single source of truth for a run.

One JSONL line per event; the state sequence, counters, cost, metrics, the
UI view, and deterministic replay are all derived from this file.  Writing
is crash-only: every event is flushed to disk the moment it is appended.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

EVENT_TYPES = frozenset(
    {
        "user_input",
        "llm_call",
        "action",
        "execution",
        "transition",
        "forced",
        "repair_outcome",
        "final",
    }
)

#: Fields stripped by normalization: wall-clock times and machine-local paths
#: legitimately differ between a recording and its replay.
NORMALIZE_DROP_KEYS = frozenset({"wall_clock", "elapsed", "wall_time", "workdir"})


class CorruptTranscript(Exception):
    pass


@dataclass(frozen=True)
class Event:
    seq: int
    wall_clock: float
    type: str
    payload: dict

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "wall_clock": self.wall_clock,
            "type": self.type,
            "payload": self.payload,
        }


class Transcript:
    """Thread-safe in-memory event list, mirrored to a JSONL file if given."""

    def __init__(self, path: str | Path | None = None) -> None:
        self._events: list[Event] = []
        self._lock = threading.Lock()
        self._new_event = threading.Condition(self._lock)
        self._path = Path(path) if path is not None else None
        self._fh = self._path.open("a", encoding="utf-8") if self._path else None

    @property
    def path(self) -> Path | None:
        return self._path

    def append(self, type: str, payload: dict) -> Event:
        if type not in EVENT_TYPES:
            raise ValueError(f"unknown event type {type!r}")
        with self._new_event:
            event = Event(
                seq=len(self._events) + 1,
                wall_clock=time.time(),
                type=type,
                payload=payload,
            )
            self._events.append(event)
            if self._fh is not None:
                self._fh.write(json.dumps(event.to_json(), ensure_ascii=False) + "\n")
                self._fh.flush()
            self._new_event.notify_all()
        return event

    def preload(self, events: Iterable[Event]) -> None:
        """Seed a fresh transcript with recorded events, timestamps intact.

        Used when a session is restored from a recording: the continuation
        file stays self-contained.  Only valid before any append.
        """

        with self._new_event:
            if self._events:
                raise ValueError("preload requires an empty transcript")
            for event in events:
                self._events.append(event)
                if self._fh is not None:
                    self._fh.write(json.dumps(event.to_json(), ensure_ascii=False) + "\n")
            if self._fh is not None:
                self._fh.flush()
            self._new_event.notify_all()

    def events(self, since: int = 0) -> list[Event]:
        with self._lock:
            return [e for e in self._events if e.seq > since]

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def wait_beyond(self, seq: int, timeout: float | None = None) -> bool:
        """Block until an event with a higher seq exists (or timeout)."""

        with self._new_event:
            return self._new_event.wait_for(
                lambda: self._events and self._events[-1].seq > seq, timeout
            )

    def tail(
        self,
        since: int = 0,
        *,
        stop: Callable[[], bool] | None = None,
        poll_s: float = 0.2,
    ) -> Iterator[Event]:
        """Yield events from ``since`` onward, then follow live appends."""

        cursor = since
        while True:
            batch = self.events(cursor)
            for event in batch:
                cursor = event.seq
                yield event
            if stop is not None and stop():
                return
            if not self.wait_beyond(cursor, timeout=poll_s) and stop is None:
                continue

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def load_events(path: str | Path) -> list[Event]:
    events: list[Event] = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorruptTranscript(f"cannot read transcript {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            events.append(
                Event(
                    seq=record["seq"],
                    wall_clock=record["wall_clock"],
                    type=record["type"],
                    payload=record["payload"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorruptTranscript(f"{path}:{lineno}: malformed event: {exc}") from exc
    return events


def _scrub(value):
    if isinstance(value, dict):
        return {
            k: _scrub(v) for k, v in sorted(value.items()) if k not in NORMALIZE_DROP_KEYS
        }
    if isinstance(value, list):
        return [_scrub(v) for v in value]
    return value


def normalize_events(events: Iterable[Event] | Sequence[dict]) -> str:
    """Canonical byte form of a transcript, stripped of time and local paths.

    Two runs are considered identical exactly when their normalized forms
    are byte-equal.
    """

    lines = []
    for event in events:
        record = event.to_json() if isinstance(event, Event) else dict(event)
        lines.append(
            json.dumps(_scrub(record), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        )
    return "\n".join(lines) + "\n"


def normalize_file(path: str | Path) -> str:
    return normalize_events(load_events(path))
