"""Cells, actions, and the text protocol between the agent and the engine.

Everything the agent, the user, and the execution environment exchange is a
sequence of markdown and code cells.  This module owns that vocabulary:

* :class:`Cell` / :class:`CellOutput` — immutable value objects for one
  notebook cell and its captured execution outputs.
* :class:`ActionSignal` / :class:`Action` — one parsed LLM turn: a leading
  action-signal token followed by fenced cells.
* :func:`parse_action` — total parser from raw LLM text to an ``Action`` or a
  typed :class:`ParseError`.
* :func:`render_context` — deterministic inverse: cells (plus outputs) back
  to prompt text.
* :func:`export_notebook` — active-path cells to an nbformat-v4 compatible
  JSON document.
"""

from __future__ import annotations

import base64
import dataclasses
import itertools
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence, TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, types only
    from .statemachine import AgentState


class CellKind(Enum):
    MARKDOWN = "markdown"
    CODE = "code"


class OutputChannel(Enum):
    STDOUT = "stdout"
    STDERR = "stderr"
    RICH = "rich"
    ERROR = "error"


class OriginStage(Enum):
    """Which stage of a session produced a cell."""

    INIT = "init"
    PLAN = "plan"
    EXEC = "exec"
    DEBUG = "debug"
    FILTER = "filter"
    USER = "user"


class Signal(Enum):
    """Canonical action signals (one token heads every agent turn)."""

    ADVANCE_NEXT_STEP = "advance_next_step"
    ITERATE_CURRENT_STEP = "iterate_current_step"
    FULFIL_INSTRUCTION = "fulfil_instruction"
    AWAIT = "await"
    END_STEP = "end_step"
    END_DEBUG = "end_debug"
    DEBUG_FAILURE = "debug_failure"
    DEBUG_SUCCESS = "debug_success"


#: Canonical token spelling for each signal (the underscore form).
CANONICAL_TOKENS: dict[Signal, str] = {
    Signal.ADVANCE_NEXT_STEP: "<Advance_to_Next_Step>",
    Signal.ITERATE_CURRENT_STEP: "<Iterate_on_the_Current_Step>",
    Signal.FULFIL_INSTRUCTION: "<Fulfil_Instruction>",
    Signal.AWAIT: "<Await>",
    Signal.END_STEP: "<End_Step>",
    Signal.END_DEBUG: "<End_Debug>",
    Signal.DEBUG_FAILURE: "<Debug_Failure>",
    Signal.DEBUG_SUCCESS: "<Debug_Success>",
}


def canonical_token(signal: Signal) -> str:
    return CANONICAL_TOKENS[signal]


def _normalize_token(interior: str) -> str:
    """Case-insensitive token interior: underscores become spaces."""

    return re.sub(r"\s+", " ", interior.replace("_", " ")).strip().lower()


@dataclass(frozen=True)
class SignalAliasTable:
    """Maps token interiors (normalized) to canonical signals.

    The default table accepts both the canonical underscore tokens and the
    phrasing the stage prompts use (e.g. ``<Fulfill USER INSTRUCTION>``,
    ``<await>``).  Matching is case-insensitive on the token interior.
    """

    aliases: dict[str, Signal] = field(default_factory=dict)

    def lookup(self, interior: str) -> Signal | None:
        return self.aliases.get(_normalize_token(interior))

    def with_alias(self, interior: str, signal: Signal) -> "SignalAliasTable":
        merged = dict(self.aliases)
        merged[_normalize_token(interior)] = signal
        return SignalAliasTable(merged)

    def tokens_for(self, signal: Signal) -> list[str]:
        return [k for k, v in self.aliases.items() if v is signal]


def default_alias_table() -> SignalAliasTable:
    table: dict[str, Signal] = {}
    for signal, token in CANONICAL_TOKENS.items():
        table[_normalize_token(token[1:-1])] = signal
    # Prompt-side spellings.
    table[_normalize_token("Advance to Next STEP")] = Signal.ADVANCE_NEXT_STEP
    table[_normalize_token("Iterate on Current STEP")] = Signal.ITERATE_CURRENT_STEP
    table[_normalize_token("Fulfill USER INSTRUCTION")] = Signal.FULFIL_INSTRUCTION
    table[_normalize_token("Fulfil USER INSTRUCTION")] = Signal.FULFIL_INSTRUCTION
    table[_normalize_token("Fulfill Instruction")] = Signal.FULFIL_INSTRUCTION
    return SignalAliasTable(table)


@dataclass(frozen=True)
class CellOutput:
    """One captured output of an executed code cell.

    Exactly the fields of the declared channel are populated; ``truncated``
    implies an elision marker is present in ``text``.
    """

    channel: OutputChannel
    text: str = ""
    mime: str | None = None
    payload_path: str | None = None
    error_name: str | None = None
    error_value: str | None = None
    traceback: tuple[str, ...] = ()
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.channel is OutputChannel.ERROR:
            if self.error_name is None:
                raise ValueError("error output requires error_name")
        else:
            if self.error_name or self.error_value or self.traceback:
                raise ValueError("error fields only valid on error channel")
        if self.channel is not OutputChannel.RICH and (self.mime or self.payload_path):
            raise ValueError("mime/payload_path only valid on rich channel")
        if self.truncated and ELISION_MARK not in self.text:
            raise ValueError("truncated output must carry an elision marker")

    def to_json(self) -> dict:
        record: dict = {"channel": self.channel.value, "text": self.text}
        if self.channel is OutputChannel.RICH:
            record["mime"] = self.mime
            record["payload_path"] = self.payload_path
        if self.channel is OutputChannel.ERROR:
            record["error_name"] = self.error_name
            record["error_value"] = self.error_value
            record["traceback"] = list(self.traceback)
        if self.truncated:
            record["truncated"] = True
        return record

    @staticmethod
    def from_json(record: dict) -> "CellOutput":
        return CellOutput(
            channel=OutputChannel(record["channel"]),
            text=record.get("text", ""),
            mime=record.get("mime"),
            payload_path=record.get("payload_path"),
            error_name=record.get("error_name"),
            error_value=record.get("error_value"),
            traceback=tuple(record.get("traceback", ())),
            truncated=record.get("truncated", False),
        )


@dataclass(frozen=True)
class Cell:
    """One markdown or code cell; the atom of all interaction."""

    id: str
    kind: CellKind
    source: str
    language_tag: str = "python"
    outputs: tuple[CellOutput, ...] = ()
    origin_stage: OriginStage = OriginStage.USER

    def __post_init__(self) -> None:
        if self.kind is CellKind.MARKDOWN and self.outputs:
            raise ValueError("markdown cells carry no outputs")

    def with_outputs(self, outputs: Sequence[CellOutput]) -> "Cell":
        return dataclasses.replace(self, outputs=tuple(outputs))

    @property
    def has_error(self) -> bool:
        return any(o.channel is OutputChannel.ERROR for o in self.outputs)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "language_tag": self.language_tag,
            "source": self.source,
            "outputs": [o.to_json() for o in self.outputs],
            "origin_stage": self.origin_stage.value,
        }

    @staticmethod
    def from_json(record: dict) -> "Cell":
        return Cell(
            id=record["id"],
            kind=CellKind(record["kind"]),
            source=record["source"],
            language_tag=record.get("language_tag", "python"),
            outputs=tuple(CellOutput.from_json(o) for o in record.get("outputs", ())),
            origin_stage=OriginStage(record.get("origin_stage", "user")),
        )


@dataclass(frozen=True)
class ActionSignal:
    canonical: Signal
    raw: str

    @staticmethod
    def implicit(signal: Signal) -> "ActionSignal":
        return ActionSignal(canonical=signal, raw=CANONICAL_TOKENS[signal])


@dataclass(frozen=True)
class Action:
    """One parsed LLM turn: exactly one signal plus an ordered cell list."""

    signal: ActionSignal
    cells: tuple[Cell, ...]
    stage: "AgentState"

    @property
    def code_cells(self) -> tuple[Cell, ...]:
        return tuple(c for c in self.cells if c.kind is CellKind.CODE)

    @property
    def markdown_cells(self) -> tuple[Cell, ...]:
        return tuple(c for c in self.cells if c.kind is CellKind.MARKDOWN)


class ParseError(ValueError):
    """Base for all action-parse failures; parsing never raises anything else."""


class NoSignal(ParseError):
    pass


class InadmissibleSignal(ParseError):
    pass


class EmptyAction(ParseError):
    pass


class ForbiddenCode(ParseError):
    """Code cells present on a signal whose action must be markdown-only."""


class MissingStepGoal(ParseError):
    """Planning action without a non-empty ``[STEP GOAL]:`` markdown cell."""


STEP_GOAL_LABEL = "[STEP GOAL]:"
_STEP_GOAL_RE = re.compile(r"^\s*\[STEP GOAL\]:\s*(?P<goal>.*)", re.DOTALL)
_SIGNAL_RE = re.compile(r"^[\s*`]*<(?P<interior>[^<>\n]+)>")
_FENCE_RE = re.compile(r"^(?P<fence>`{3,})(?P<info>[^`\n]*)$")

#: Marker inserted where output text was elided.
ELISION_MARK = "chars truncated"


@dataclass(frozen=True)
class TruncationPolicy:
    """Head+tail character budget applied to each rendered output stream."""

    head_chars: int = 2000
    tail_chars: int = 2000

    def apply(self, text: str) -> tuple[str, bool]:
        if len(text) <= self.head_chars + self.tail_chars:
            return text, False
        elided = len(text) - self.head_chars - self.tail_chars
        marker = f"\n... [{elided} {ELISION_MARK}] ...\n"
        return text[: self.head_chars] + marker + text[-self.tail_chars :], True


def step_goal_text(cells: Sequence[Cell]) -> str | None:
    """Goal text of the first ``[STEP GOAL]:`` markdown cell, if any."""

    for cell in cells:
        if cell.kind is CellKind.MARKDOWN:
            m = _STEP_GOAL_RE.match(cell.source)
            if m:
                return m.group("goal").strip()
    return None


def _id_factory(prefix: str = "p") -> Iterator[str]:
    return (f"{prefix}{i}" for i in itertools.count())


def parse_cells(
    text: str,
    *,
    language_tag: str = "python",
    origin: OriginStage = OriginStage.USER,
    ids: Iterator[str] | None = None,
) -> list[Cell]:
    """Split text into cells: fenced blocks become cells, prose folds into markdown.

    Fences are three-or-more backticks; the info string selects the kind
    (``markdown``, the configured code tag, anything else is treated as
    markdown).  An unclosed fence runs to end of input.  Total: any bytes in,
    cells out.
    """

    ids = ids if ids is not None else _id_factory()
    cells: list[Cell] = []
    prose: list[str] = []

    def flush_prose() -> None:
        body = "\n".join(prose).strip("\n")
        prose.clear()
        if body.strip():
            cells.append(
                Cell(next(ids), CellKind.MARKDOWN, body, language_tag, (), origin)
            )

    # Split strictly on newlines: splitlines() would also split on exotic
    # Unicode separators and break render/parse round-trips.
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        m = _FENCE_RE.match(lines[i])
        if not m:
            prose.append(lines[i])
            i += 1
            continue
        flush_prose()
        fence, info = m.group("fence"), m.group("info").strip()
        body_lines: list[str] = []
        i += 1
        while i < len(lines):
            close = _FENCE_RE.match(lines[i])
            if close and len(close.group("fence")) >= len(fence) and not close.group("info").strip():
                i += 1
                break
            body_lines.append(lines[i])
            i += 1
        body = "\n".join(body_lines)
        kind = CellKind.CODE if info == language_tag else CellKind.MARKDOWN
        cells.append(Cell(next(ids), kind, body, language_tag, (), origin))
    flush_prose()
    return cells


_ORIGIN_FOR_STAGE = {
    "plan": OriginStage.PLAN,
    "exec": OriginStage.EXEC,
    "debug": OriginStage.DEBUG,
    "filter": OriginStage.FILTER,
}

#: Signals whose actions may legitimately carry zero cells.
_MAY_BE_EMPTY = frozenset(
    {Signal.END_STEP, Signal.END_DEBUG, Signal.FULFIL_INSTRUCTION, Signal.DEBUG_FAILURE}
)
#: Signals whose actions must not contain code cells.
_MARKDOWN_ONLY = frozenset({Signal.FULFIL_INSTRUCTION, Signal.DEBUG_FAILURE})
#: Planning signals that must announce a step goal.
_NEEDS_STEP_GOAL = frozenset({Signal.ADVANCE_NEXT_STEP, Signal.ITERATE_CURRENT_STEP})


def parse_action(
    raw: str,
    stage: "AgentState",
    aliases: SignalAliasTable | None = None,
    *,
    language_tag: str = "python",
    ids: Iterator[str] | None = None,
    admissible: frozenset[Signal] | None = None,
) -> Action:
    """Parse one LLM reply into an :class:`Action` for the given stage.

    Raises a :class:`ParseError` subclass on any malformed input; never
    anything else.  ``admissible`` overrides the stage's default signal set
    (used by ablations).
    """

    from .statemachine import admissible_signals  # local import avoids a cycle

    aliases = aliases or default_alias_table()
    allowed = admissible if admissible is not None else admissible_signals(stage)

    m = _SIGNAL_RE.match(raw)
    if not m:
        raise NoSignal("response does not start with an action-signal token")
    signal = aliases.lookup(m.group("interior"))
    if signal is None:
        raise NoSignal(f"unrecognized action signal <{m.group('interior')}>")
    if signal not in allowed:
        raise InadmissibleSignal(
            f"signal {canonical_token(signal)} is not admissible in stage {stage.value}"
        )

    origin = _ORIGIN_FOR_STAGE.get(stage.value, OriginStage.USER)
    cells = parse_cells(
        raw[m.end() :], language_tag=language_tag, origin=origin, ids=ids
    )

    if not cells and signal not in _MAY_BE_EMPTY:
        raise EmptyAction(f"{canonical_token(signal)} requires at least one cell")
    if signal in _MARKDOWN_ONLY and any(c.kind is CellKind.CODE for c in cells):
        raise ForbiddenCode(f"{canonical_token(signal)} actions must not contain code cells")
    if signal is Signal.DEBUG_SUCCESS and not any(c.kind is CellKind.CODE for c in cells):
        raise EmptyAction("<Debug_Success> requires at least one cleaned code cell")
    if signal in _NEEDS_STEP_GOAL and not step_goal_text(cells):
        raise MissingStepGoal(
            f'{canonical_token(signal)} requires a markdown cell starting with "{STEP_GOAL_LABEL}"'
        )

    token = raw[m.start() : m.end()].strip().strip("*`").strip()
    return Action(signal=ActionSignal(signal, token), cells=tuple(cells), stage=stage)


def _fenced(tag: str, body: str) -> str:
    runs = re.findall(r"`+", body)
    width = max([3] + [len(r) + 1 for r in runs])
    fence = "`" * width
    return f"{fence}{tag}\n{body}\n{fence}"


def _render_output(output: CellOutput, policy: TruncationPolicy) -> str:
    if output.channel is OutputChannel.ERROR:
        lead = f"{output.error_name}: {output.error_value or ''}".rstrip()
        trace, _ = policy.apply("\n".join(output.traceback))
        body = lead if not trace else f"{lead}\n{trace}"
        return _fenced("output:error", body)
    if output.channel is OutputChannel.RICH:
        lines = []
        if output.payload_path:
            lines.append(f"[media: {output.payload_path}] ({output.mime})")
        if output.text:
            lines.append(policy.apply(output.text)[0])
        return _fenced("output:rich", "\n".join(lines))
    text, _ = policy.apply(output.text)
    return _fenced(f"output:{output.channel.value}", text)


def render_context(
    cells: Sequence[Cell], policy: TruncationPolicy | None = None
) -> str:
    """Render cells (and their outputs) back to deterministic prompt text.

    Truncation applies to outputs only; cell sources are never altered.
    Re-parsing the rendered form of output-free cells reproduces their kinds
    and sources exactly.
    """

    policy = policy or TruncationPolicy()
    blocks: list[str] = []
    for cell in cells:
        tag = "markdown" if cell.kind is CellKind.MARKDOWN else cell.language_tag
        blocks.append(_fenced(tag, cell.source))
        for output in cell.outputs:
            blocks.append(_render_output(output, policy))
    return "\n\n".join(blocks)


@dataclass(frozen=True)
class SessionMeta:
    session_id: str = ""
    language_tag: str = "python"
    kernel_name: str = "python3"
    created: str = ""


class SerializationError(Exception):
    """A cell output payload could not be encoded into the notebook document."""


def _notebook_output(output: CellOutput, workdir: Path | None) -> dict:
    if output.channel in (OutputChannel.STDOUT, OutputChannel.STDERR):
        return {
            "output_type": "stream",
            "name": output.channel.value,
            "text": output.text,
        }
    if output.channel is OutputChannel.ERROR:
        return {
            "output_type": "error",
            "ename": output.error_name or "Error",
            "evalue": output.error_value or "",
            "traceback": list(output.traceback),
        }
    data: dict = {}
    if output.payload_path:
        path = Path(output.payload_path)
        if workdir is not None and not path.is_absolute():
            path = workdir / path
        try:
            payload = path.read_bytes()
        except OSError as exc:
            raise SerializationError(f"cannot read rich payload {path}: {exc}") from exc
        data[output.mime or "application/octet-stream"] = base64.b64encode(
            payload
        ).decode("ascii")
    if output.text:
        data.setdefault("text/plain", output.text)
    if not data:
        data["text/plain"] = ""
    return {"output_type": "display_data", "data": data, "metadata": {}}


def export_notebook(
    trace: Sequence[Cell],
    meta: SessionMeta | None = None,
    *,
    workdir: str | Path | None = None,
) -> dict:
    """Build an nbformat-v4 compatible notebook document from a cell trace.

    ``workdir`` resolves relative rich-output payload paths.  Raises
    :class:`SerializationError` when a referenced payload cannot be read.
    """

    meta = meta or SessionMeta()
    wd = Path(workdir) if workdir is not None else None
    nb_cells: list[dict] = []
    execution_count = 0
    for cell in trace:
        cell_meta = {"cellflow": {"id": cell.id, "origin_stage": cell.origin_stage.value}}
        if cell.kind is CellKind.MARKDOWN:
            nb_cells.append(
                {"cell_type": "markdown", "metadata": cell_meta, "source": cell.source}
            )
            continue
        execution_count += 1
        nb_cells.append(
            {
                "cell_type": "code",
                "execution_count": execution_count,
                "metadata": cell_meta,
                "source": cell.source,
                "outputs": [_notebook_output(o, wd) for o in cell.outputs],
            }
        )
    return {
        "nbformat": 4,
        "nbformat_minor": 5,
        "metadata": {
            "kernelspec": {
                "name": meta.kernel_name,
                "display_name": meta.kernel_name,
                "language": meta.language_tag,
            },
            "language_info": {"name": meta.language_tag},
        },
        "cells": nb_cells,
    }


def write_notebook(
    path: str | Path,
    trace: Sequence[Cell],
    meta: SessionMeta | None = None,
    *,
    workdir: str | Path | None = None,
) -> None:
    document = export_notebook(trace, meta, workdir=workdir)
    Path(path).write_text(json.dumps(document, indent=1), encoding="utf-8")
