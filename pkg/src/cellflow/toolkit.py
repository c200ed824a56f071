"""Tool integration: markdown contracts plus setup cells, and the visual tool.

Tools enter a session the way a person would add them to a notebook: a
markdown cell describing the tool and a code cell importing or defining it,
both injected into the preamble at initialization.  The visual evaluation
tool judges an image against stated requirements through a vision model,
under a hard per-task call budget.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .cellmodel import Cell, CellKind, OriginStage
from .llmgateway import (
    ChatMessage,
    CompletionParams,
    CostLedger,
    GatewayError,
    Provider,
    complete,
)

logger = logging.getLogger(__name__)

LIMIT_MESSAGE = "Usage limit reached. Please manually evaluate."


class ToolError(Exception):
    pass


class InvalidImagePath(ToolError):
    pass


class EmptyArgument(ToolError):
    pass


class ModelCallFailed(ToolError):
    pass


@dataclass(frozen=True)
class ToolDescriptor:
    """One tool: human-readable contract plus an optional setup code cell."""

    name: str
    description_md: str
    setup_code: str | None = None
    contract_text: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "description_md": self.description_md,
            "setup_code": self.setup_code,
            "contract_text": self.contract_text,
        }

    @staticmethod
    def from_json(record: dict) -> "ToolDescriptor":
        return ToolDescriptor(
            name=record["name"],
            description_md=record.get("description_md", ""),
            setup_code=record.get("setup_code"),
            contract_text=record.get("contract_text", ""),
        )


def load_tool_registry(path: str | Path) -> list[ToolDescriptor]:
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    return [ToolDescriptor.from_json(r) for r in records]


@dataclass
class PreambleResult:
    cells: tuple[Cell, ...]
    disabled: tuple[str, ...] = ()


def inject_tools(
    descriptors: Sequence[ToolDescriptor],
    env_info: str,
    *,
    handle=None,
    language_tag: str = "python",
    ids: Iterator[str] | None = None,
) -> PreambleResult:
    """Build (and optionally execute) the session preamble cells.

    Order: environment-info markdown, then per tool a description markdown
    cell and its setup code cell.  When a live handle is given, setup cells
    run once; a failing setup disables that tool and appends a warning cell
    instead, and the session continues.
    """

    counter = iter(f"t{i}" for i in range(10_000))
    ids = ids if ids is not None else counter

    def md(text: str) -> Cell:
        return Cell(next(ids), CellKind.MARKDOWN, text, language_tag, (), OriginStage.INIT)

    def code(text: str) -> Cell:
        return Cell(next(ids), CellKind.CODE, text, language_tag, (), OriginStage.INIT)

    cells: list[Cell] = [md(env_info)]
    disabled: list[str] = []
    for tool in descriptors:
        description = tool.description_md
        if tool.contract_text:
            description = f"{description}\n\n{tool.contract_text}"
        tool_cells: list[Cell] = [md(f"## Tool: {tool.name}\n\n{description}")]
        ok = True
        if tool.setup_code:
            setup = code(tool.setup_code)
            if handle is not None:
                result = handle.execute_cells([setup])
                setup = setup.with_outputs(result.cell_outputs[0])
                ok = not result.feedback.is_error
            tool_cells.append(setup)
        if ok:
            cells.extend(tool_cells)
        else:
            disabled.append(tool.name)
            detail = setup.outputs[-1] if setup.outputs else None
            reason = f"{detail.error_name}: {detail.error_value}" if detail else "setup failed"
            logger.warning("tool %s disabled: %s", tool.name, reason)
            cells.append(md(f"## Tool: {tool.name} (disabled)\n\nSetup failed ({reason}); the tool is unavailable."))
    return PreambleResult(cells=tuple(cells), disabled=tuple(disabled))


@dataclass
class VisualToolState:
    """Per-task call budget for the visual evaluation tool."""

    evaluation_cnt: int = 0
    global_cnt: int = 4

    def reset(self) -> None:
        self.evaluation_cnt = 0


def evaluate_image(
    image_path: str | Path,
    requirements: str,
    query: str,
    state: VisualToolState,
    provider: Provider,
    params: CompletionParams,
    *,
    ledger: CostLedger | None = None,
    price_table=None,
) -> str:
    """Judge an image against requirements via the vision model.

    The budget check comes first and returns the literal limit message
    without a model call; failed model calls never consume budget.
    """

    if state.evaluation_cnt >= state.global_cnt:
        return LIMIT_MESSAGE

    path = Path(image_path)
    if not path.is_file():
        raise InvalidImagePath(f"image path {image_path!r} is invalid or does not exist")
    if not requirements or not query:
        raise EmptyArgument("requirements and query must be non-empty")

    encoded = base64.b64encode(path.read_bytes()).decode("ascii")
    mime = mimetypes.guess_type(str(path))[0] or "image/png"
    prompt = "Expected Requirements:\n" + requirements
    prompt += "\nQuery:\n" + query
    prompt += "\nYour response:\n"
    message = ChatMessage(
        role="user",
        content=(
            {"type": "text", "text": prompt},
            {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{encoded}"}},
        ),
    )
    try:
        completion = complete([message], params, provider)
    except GatewayError as exc:
        raise ModelCallFailed(str(exc)) from exc
    state.evaluation_cnt += 1
    if ledger is not None:
        ledger.add(params.model, completion.usage, price_table)
    return completion.text


_KERNEL_TOOL_TEMPLATE = '''import base64 as _b64, json as _json, mimetypes as _mt, os as _os, urllib.request as _rq

GLOBAL_CNT = {global_cnt}
EVALUATION_CNT = 0

def evaluate_image(image_path, requirements, query):
    """Judge an image against the stated requirements; limited to {global_cnt} calls per task."""
    global EVALUATION_CNT
    if EVALUATION_CNT >= GLOBAL_CNT:
        return "Usage limit reached. Please manually evaluate."
    if not isinstance(image_path, str) or not _os.path.isfile(image_path):
        raise ValueError("image path is invalid or does not exist")
    if not requirements or not query:
        raise ValueError("requirements and query must be non-empty")
    endpoint = {endpoint!r}
    if not endpoint:
        return "Visual tool endpoint not configured; please evaluate manually."
    with open(image_path, "rb") as fh:
        encoded = _b64.b64encode(fh.read()).decode("ascii")
    mime = _mt.guess_type(image_path)[0] or "image/png"
    prompt = "Expected Requirements:\\n" + requirements + "\\nQuery:\\n" + query + "\\nYour response:\\n"
    body = _json.dumps({{
        "model": {model!r},
        "temperature": 0,
        "messages": [{{"role": "user", "content": [
            {{"type": "text", "text": prompt}},
            {{"type": "image_url", "image_url": {{"url": "data:" + mime + ";base64," + encoded}}}},
        ]}}],
    }}).encode("utf-8")
    request = _rq.Request(endpoint, data=body, headers={{"Content-Type": "application/json"}})
    with _rq.urlopen(request, timeout=120) as response:
        reply = _json.loads(response.read().decode("utf-8"))
    EVALUATION_CNT += 1
    return reply["choices"][0]["message"]["content"]
'''


def visual_tool_descriptor(
    *,
    endpoint: str | None = None,
    model: str = "judge",
    global_cnt: int = 4,
) -> ToolDescriptor:
    """Descriptor exposing ``evaluate_image`` inside the execution environment."""

    setup = _KERNEL_TOOL_TEMPLATE.format(
        global_cnt=global_cnt, endpoint=endpoint or "", model=model
    )
    return ToolDescriptor(
        name="visual_evaluator",
        description_md=(
            "Judges a generated figure against the task requirements using a "
            "vision model and returns textual feedback for refinement."
        ),
        setup_code=setup,
        contract_text=(
            f"Call `evaluate_image(image_path, requirements, query)` after saving a figure. "
            f"It may be used at most {global_cnt} times per task; past the limit it returns "
            f'"{LIMIT_MESSAGE}".'
        ),
    )
