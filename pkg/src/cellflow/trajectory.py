"""Tree-structured task trajectory and assembly of the agent's context.

The trajectory is a spine-shaped tree: every turn appends a node to the end
of the active chain (step-goal headers and execution turns alike), and
backtracking marks the current step's subtree replaced while a fresh step
takes its position as a sibling branch.  Replaced branches stay in the tree
(they count toward search cost and remain reconstructible) but never appear
in assembled context.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .cellmodel import (
    Action,
    ActionSignal,
    Cell,
    CellKind,
    OriginStage,
    Signal,
    TruncationPolicy,
    render_context,
    step_goal_text,
)
from .llmgateway import ChatMessage
from .statemachine import AgentState


class NodeKind(Enum):
    ROOT = "root"
    STEP_GOAL = "step_goal"
    EXEC_TURN = "exec_turn"
    REPAIR_REPORT = "repair_report"


class NodeStatus(Enum):
    ACTIVE = "active"
    REPLACED = "replaced"
    COMPLETED = "completed"
    FAILED = "failed"


class TrajectoryError(Exception):
    pass


class NothingToReplace(TrajectoryError):
    pass


class UnknownTurn(TrajectoryError):
    pass


@dataclass
class TrajectoryNode:
    id: str
    kind: NodeKind
    parent: str | None
    children: list[str] = field(default_factory=list)
    status: NodeStatus = NodeStatus.ACTIVE
    action: Action | None = None
    goal_text: str | None = None
    observations: tuple[Cell, ...] = ()
    feedback_error: bool = False

    @property
    def cells(self) -> tuple[Cell, ...]:
        own = self.action.cells if self.action is not None else ()
        return tuple(self.observations) + tuple(own)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "parent": self.parent,
            "children": list(self.children),
            "status": self.status.value,
            "goal_text": self.goal_text,
            "feedback_error": self.feedback_error,
            "cells": [c.to_json() for c in self.cells],
        }


class TrajectoryTree:
    """Mutable per-session trajectory; mutated only by the session loop."""

    def __init__(self) -> None:
        self._n = 0
        root = TrajectoryNode(id="n0", kind=NodeKind.ROOT, parent=None)
        self.nodes: dict[str, TrajectoryNode] = {root.id: root}
        self.root_id = root.id

    def _new_id(self) -> str:
        self._n += 1
        return f"n{self._n}"

    def node(self, node_id: str) -> TrajectoryNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownTurn(f"no trajectory node {node_id!r}") from None

    def spine(self) -> list[TrajectoryNode]:
        """Root-to-tail chain of non-replaced nodes (the active path)."""

        path = [self.nodes[self.root_id]]
        while True:
            live = [
                self.nodes[cid]
                for cid in path[-1].children
                if self.nodes[cid].status is not NodeStatus.REPLACED
            ]
            if not live:
                return path
            # DFS discipline keeps at most one live child; take the latest.
            path.append(live[-1])

    def tail(self) -> TrajectoryNode:
        return self.spine()[-1]

    def current_step(self) -> TrajectoryNode | None:
        """Deepest goal-bearing node on the active path."""

        for node in reversed(self.spine()):
            if node.goal_text is not None:
                return node
        return None

    def advance(
        self,
        goal_text: str,
        action: Action,
        observations: Sequence[Cell] = (),
    ) -> TrajectoryNode:
        """Append a fresh active step goal after the current chain tail."""

        if not goal_text.strip():
            raise TrajectoryError("a step goal requires non-empty goal text")
        parent = self.tail()
        node = TrajectoryNode(
            id=self._new_id(),
            kind=NodeKind.STEP_GOAL,
            parent=parent.id,
            action=action,
            goal_text=goal_text,
            observations=tuple(observations),
        )
        self.nodes[node.id] = node
        parent.children.append(node.id)
        return node

    def add_turn(self, action: Action) -> TrajectoryNode:
        """Append an execution-turn node at the chain tail."""

        parent = self.tail()
        node = TrajectoryNode(
            id=self._new_id(),
            kind=NodeKind.EXEC_TURN,
            parent=parent.id,
            action=action,
        )
        self.nodes[node.id] = node
        parent.children.append(node.id)
        return node

    def _mark_replaced(self, node: TrajectoryNode) -> None:
        node.status = NodeStatus.REPLACED
        for cid in node.children:
            self._mark_replaced(self.nodes[cid])

    def backtrack_replace(
        self,
        observations: Sequence[Cell],
        goal_text: str,
        action: Action,
    ) -> TrajectoryNode:
        """Replace the current step's subtree with a fresh step in its position."""

        current = self.current_step()
        if current is None or current.kind is NodeKind.ROOT:
            raise NothingToReplace("no current step goal to replace")
        if not goal_text.strip():
            raise TrajectoryError("a step goal requires non-empty goal text")
        self._mark_replaced(current)
        parent = self.nodes[current.parent]  # type: ignore[index]
        node = TrajectoryNode(
            id=self._new_id(),
            kind=NodeKind.STEP_GOAL,
            parent=parent.id,
            action=action,
            goal_text=goal_text,
            observations=tuple(observations),
        )
        self.nodes[node.id] = node
        parent.children.append(node.id)
        return node

    def record_execution(self, node_id: str, executed: Action, *, error: bool) -> None:
        """Attach executed cells (with outputs) back onto a turn's node."""

        node = self.node(node_id)
        node.action = executed
        node.feedback_error = error
        if node.kind is NodeKind.EXEC_TURN:
            node.status = NodeStatus.FAILED if error else NodeStatus.COMPLETED

    def splice_success(self, failed_turn_id: str, cleaned_action: Action) -> TrajectoryNode:
        """Swap a faulty turn's content for the post-filter cleaned action.

        The node keeps its identity and position; the raw faulty action
        survives only in the transcript.
        """

        node = self.node(failed_turn_id)
        if not node.feedback_error:
            raise UnknownTurn(f"turn {failed_turn_id} did not fail; nothing to repair")
        if node.goal_text is not None and step_goal_text(cleaned_action.cells) is None:
            # Keep the step header visible in the trace after the swap.
            goal_cell = next(
                (
                    c
                    for c in node.cells
                    if c.kind is CellKind.MARKDOWN and step_goal_text([c]) is not None
                ),
                None,
            )
            if goal_cell is not None:
                cleaned_action = dataclasses.replace(
                    cleaned_action, cells=(goal_cell,) + tuple(cleaned_action.cells)
                )
        node.action = cleaned_action
        node.feedback_error = any(c.has_error for c in cleaned_action.cells)
        if node.kind is NodeKind.EXEC_TURN and not node.feedback_error:
            node.status = NodeStatus.COMPLETED
        return node

    def splice_failure(self, failed_turn_id: str, report_action: Action) -> TrajectoryNode:
        """Replace a faulty turn with a markdown diagnostic-report node."""

        node = self.node(failed_turn_id)
        if not node.feedback_error:
            raise UnknownTurn(f"turn {failed_turn_id} did not fail; nothing to repair")
        self._mark_replaced(node)
        parent = self.nodes[node.parent] if node.parent else self.nodes[self.root_id]
        report = TrajectoryNode(
            id=self._new_id(),
            kind=NodeKind.REPAIR_REPORT,
            parent=parent.id,
            status=NodeStatus.COMPLETED,
            action=report_action,
            goal_text=node.goal_text,
        )
        self.nodes[report.id] = report
        parent.children.append(report.id)
        return report

    def complete_current_step(self) -> None:
        step = self.current_step()
        if step is not None and step.status is NodeStatus.ACTIVE:
            step.status = NodeStatus.COMPLETED

    def count_nonroot(self) -> int:
        """Step-goal and execution-turn nodes, replaced ones included."""

        return sum(
            1
            for n in self.nodes.values()
            if n.kind in (NodeKind.STEP_GOAL, NodeKind.EXEC_TURN)
        )

    def active_cells(self) -> list[Cell]:
        cells: list[Cell] = []
        for node in self.spine():
            if node.kind is not NodeKind.ROOT:
                cells.extend(node.cells)
        return cells

    def to_json(self) -> dict:
        return {
            "root": self.root_id,
            "nodes": [self.nodes[k].to_json() for k in sorted(self.nodes, key=_node_order)],
        }


def _node_order(node_id: str) -> int:
    return int(node_id[1:])


@dataclass
class ContextHistory:
    """Everything the agent may see: preamble, instructions, and the tree."""

    preamble: tuple[Cell, ...] = ()
    instruction_log: list[str] = field(default_factory=list)
    tree: TrajectoryTree = field(default_factory=TrajectoryTree)

    def add_instruction(self, text: str) -> None:
        self.instruction_log.append(text)

    @property
    def latest_instruction(self) -> str:
        return self.instruction_log[-1] if self.instruction_log else ""


def assemble_context(
    history: ContextHistory,
    stage: AgentState,
    policy: TruncationPolicy | None = None,
    *,
    stage_prompt: str = "",
    episode_cells: Sequence[Cell] = (),
) -> list[ChatMessage]:
    """Deterministic message sequence for one LLM turn.

    System preamble, then the instruction log, then the active-path cells
    (replaced subtrees and raw debug traces excluded; during debugging and
    post-filtering the current episode's turns are included), and the stage
    prompt last.
    """

    policy = policy or TruncationPolicy()
    messages: list[ChatMessage] = []
    if history.preamble:
        messages.append(ChatMessage("system", render_context(history.preamble, policy)))
    if history.instruction_log:
        body = "\n\n".join(
            f"[USER INSTRUCTION]:\n{text}" for text in history.instruction_log
        )
        messages.append(ChatMessage("user", body))
    trace = history.tree.active_cells()
    if stage in (AgentState.DEBUG, AgentState.FILTER):
        trace = trace + list(episode_cells)
    if trace:
        messages.append(ChatMessage("assistant", render_context(trace, policy)))
    if stage_prompt:
        messages.append(ChatMessage("user", stage_prompt))
    return messages


def action_from_record(record: dict) -> Action:
    """Inverse of the transcript action payload (see orchestrator events)."""

    return Action(
        signal=ActionSignal(
            canonical=Signal(record["signal"]["canonical"]),
            raw=record["signal"]["raw"],
        ),
        cells=tuple(Cell.from_json(c) for c in record["cells"]),
        stage=AgentState(record["stage"]),
    )


def trace_cells_from_events(events: Sequence) -> list[Cell]:
    """Notebook-ready cell trace: preamble, instructions, and the active path.

    Instruction markdown cells interleave where each instruction arrived
    relative to the trajectory nodes that followed it.
    """

    dicts = [e if isinstance(e, dict) else e.to_json() for e in events]
    tree = rebuild_tree(dicts)
    preamble: list[Cell] = []
    instructions: list[tuple[int, str]] = []  # (id watermark, text)
    created = 0
    for event in dicts:
        payload = event.get("payload", {})
        if event["type"] == "action":
            if payload.get("stage") == "init":
                preamble = [Cell.from_json(c) for c in payload.get("cells", ())]
            elif payload.get("node_id"):
                created = max(created, _node_order(payload["node_id"]))
        elif event["type"] == "user_input":
            instructions.append((created, payload.get("instruction", "")))

    cells = list(preamble)
    pending = list(instructions)
    serial = 0

    def instruction_cell(text: str) -> Cell:
        nonlocal serial
        serial += 1
        return Cell(
            f"u{serial}", CellKind.MARKDOWN, f"**[USER INSTRUCTION]**\n\n{text}",
            origin_stage=OriginStage.USER,
        )

    for node in tree.spine():
        if node.kind is NodeKind.ROOT:
            continue
        ordinal = _node_order(node.id)
        while pending and pending[0][0] < ordinal:
            cells.append(instruction_cell(pending.pop(0)[1]))
        cells.extend(node.cells)
    for _, text in pending:
        cells.append(instruction_cell(text))
    return cells


def rebuild_tree(events: Sequence) -> TrajectoryTree:
    """Replay transcript events into an exact copy of the final trajectory tree.

    Consumes the event dicts produced by the session loop (``action``,
    ``execution``, ``transition``, ``forced``, ``repair_outcome``).
    """

    tree = TrajectoryTree()
    dicts = [e if isinstance(e, dict) else e.to_json() for e in events]
    for i, event in enumerate(dicts):
        etype = event["type"]
        payload = event.get("payload", {})
        if etype == "action" and payload.get("node_id"):
            action = action_from_record(payload)
            observations = tuple(
                Cell.from_json(c) for c in payload.get("observations", ())
            )
            op = payload.get("tree_op")
            if op == "advance":
                node = tree.advance(payload["goal_text"], action, observations)
            elif op == "backtrack":
                node = tree.backtrack_replace(observations, payload["goal_text"], action)
            elif op == "turn":
                node = tree.add_turn(action)
            else:
                continue
            if node.id != payload["node_id"]:
                raise TrajectoryError(
                    f"transcript replay drift: expected node {payload['node_id']}, built {node.id}"
                )
        elif etype == "execution" and payload.get("node_id"):
            node = tree.node(payload["node_id"])
            cells = tuple(Cell.from_json(c) for c in payload["cells"])
            if node.action is not None:
                executed = dataclasses.replace(node.action, cells=cells)
                tree.record_execution(
                    node.id, executed, error=payload["feedback"]["kind"] == "error"
                )
        elif etype == "repair_outcome":
            replacement = action_from_record(payload["replacement"])
            if payload["kind"] == "success":
                tree.splice_success(payload["node_id"], replacement)
            else:
                tree.splice_failure(payload["node_id"], replacement)
        elif etype in ("transition", "forced"):
            target = payload.get("to")
            follows_forced = (
                etype == "transition"
                and i + 1 < len(dicts)
                and dicts[i + 1]["type"] == "forced"
            )
            if not follows_forced and target in ("plan", "idle"):
                tree.complete_current_step()
    return tree
