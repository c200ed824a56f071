"""The session engine: stage prompts, the generate-execute-transition loop,
repair episodes, multi-turn idle handling, and ablation switches.

One :class:`Session` owns one execution kernel, one trajectory tree, and one
transcript.  Each turn: build the stage prompt and context, call the model,
parse the action, execute its cells, classify feedback, take the machine
transition (with budget overrides), and update the tree.  Repair episodes
run between an execution error and the post-filter splice that cleans the
context again.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import platform
import time
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator, Sequence

from . import executor as executor_mod
from .cellmodel import (
    Action,
    ActionSignal,
    Cell,
    CellKind,
    OriginStage,
    ParseError,
    Signal,
    SignalAliasTable,
    TruncationPolicy,
    canonical_token,
    default_alias_table,
    parse_action,
    parse_cells,
    step_goal_text,
)
from .executor import BackendConfig, ExecResult, KernelDead, KernelHandle, LocalBackendConfig
from .executor.gateway import GatewayConfig
from .llmgateway import (
    ChatMessage,
    Completion,
    CompletionParams,
    CostLedger,
    GatewayError,
    Provider,
    ReplayDivergence,
    Usage,
    complete,
    load_price_table,
    record_replay,
    request_hash,
)
from .statemachine import (
    AgentState,
    Budgets,
    Counters,
    Feedback,
    admissible_signals,
    apply_budgets,
    compute_resume,
    next_state,
)
from .toolkit import PreambleResult, ToolDescriptor, VisualToolState, inject_tools
from .trajectory import (
    ContextHistory,
    TrajectoryNode,
    TrajectoryTree,
    assemble_context,
)
from .transcript import Event, Transcript

logger = logging.getLogger(__name__)


class Outcome(Enum):
    FULFILLED = "fulfilled"
    BUDGET_STOP = "budget_stop"
    TIMEOUT = "timeout"
    ABORTED = "aborted"


@dataclass(frozen=True)
class Ablations:
    disable_planning: bool = False
    disable_repair: bool = False

    def to_json(self) -> dict:
        return {
            "disable_planning": self.disable_planning,
            "disable_repair": self.disable_repair,
        }


@dataclass
class SessionConfig:
    model: str = "scripted"
    temperature: float = 0.0
    budgets: Budgets = field(default_factory=Budgets)
    language_tag: str = "python"
    workdir: str = "."
    ablations: Ablations = field(default_factory=Ablations)
    task_timeout_s: float = 3600.0
    retry_on_parse_error: int = 2
    truncation: TruncationPolicy = field(default_factory=TruncationPolicy)
    backend: BackendConfig = field(default_factory=LocalBackendConfig)
    prompt_dir: str | None = None
    price_table: dict = field(default_factory=dict)
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.task_timeout_s <= 0:
            raise ValueError("task timeout must be positive")

    @property
    def params(self) -> CompletionParams:
        return CompletionParams(
            model=self.model, temperature=self.temperature, max_tokens=self.max_tokens
        )

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "budgets": self.budgets.to_json(),
            "language_tag": self.language_tag,
            "workdir": self.workdir,
            "ablations": self.ablations.to_json(),
            "task_timeout_s": self.task_timeout_s,
            "retry_on_parse_error": self.retry_on_parse_error,
            "truncation": {
                "head_chars": self.truncation.head_chars,
                "tail_chars": self.truncation.tail_chars,
            },
            "backend": self.backend.to_json(),
            "prompt_dir": self.prompt_dir,
            "price_table": {
                m: {k: str(v) for k, v in p.items()} for m, p in self.price_table.items()
            },
            "max_tokens": self.max_tokens,
        }

    @staticmethod
    def from_json(record: dict) -> "SessionConfig":
        backend_rec = record.get("backend", {"kind": "local"})
        backend: BackendConfig
        if backend_rec.get("kind") == "local":
            backend = LocalBackendConfig()
        else:
            backend = GatewayConfig(**backend_rec)
        return SessionConfig(
            model=record.get("model", "scripted"),
            temperature=record.get("temperature", 0.0),
            budgets=Budgets.from_json(record.get("budgets", {})),
            language_tag=record.get("language_tag", "python"),
            workdir=record.get("workdir", "."),
            ablations=Ablations(**record.get("ablations", {})),
            task_timeout_s=record.get("task_timeout_s", 3600.0),
            retry_on_parse_error=record.get("retry_on_parse_error", 2),
            truncation=TruncationPolicy(**record.get("truncation", {})),
            backend=backend,
            prompt_dir=record.get("prompt_dir"),
            price_table=load_price_table(record.get("price_table", {})),
            max_tokens=record.get("max_tokens"),
        )


def ablate(
    config: SessionConfig,
    *,
    disable_planning: bool | None = None,
    disable_repair: bool | None = None,
) -> SessionConfig:
    """Copy of ``config`` with ablation switches applied."""

    current = config.ablations
    return dataclasses.replace(
        config,
        ablations=Ablations(
            disable_planning=(
                current.disable_planning if disable_planning is None else disable_planning
            ),
            disable_repair=(
                current.disable_repair if disable_repair is None else disable_repair
            ),
        ),
    )


_TEMPLATE_KEYS = (
    "initial",
    "planning",
    "planning_linear",
    "execution",
    "debugging",
    "filtering",
)

_INSTRUCTION_SLOT = "{{the description of user instruction}}"
_STEP_SLOT = "{{the description of current step}}"


@dataclass
class PromptCatalog:
    """Editable stage templates with ``{{...}}`` placeholders."""

    templates: dict[str, str]

    @staticmethod
    def default() -> "PromptCatalog":
        templates = {}
        for key in _TEMPLATE_KEYS:
            templates[key] = (
                resources.files("cellflow").joinpath(f"prompts/{key}.txt").read_text("utf-8")
            )
        return PromptCatalog(templates)

    @staticmethod
    def from_dir(path: str | Path) -> "PromptCatalog":
        base = Path(path)
        templates = {}
        for key in _TEMPLATE_KEYS:
            templates[key] = (base / f"{key}.txt").read_text("utf-8")
        return PromptCatalog(templates)

    def render(
        self,
        key: str,
        *,
        instruction: str = "",
        step_goal: str = "",
        language_tag: str = "python",
    ) -> str:
        text = self.templates[key]
        text = text.replace(_INSTRUCTION_SLOT, instruction)
        text = text.replace(_STEP_SLOT, step_goal)
        if language_tag != "python":
            text = text.replace("markdown/python", f"markdown/{language_tag}")
        return text

    def offered_signals(self, key: str, aliases: SignalAliasTable | None = None) -> frozenset[Signal]:
        """Signals listed on the template's action-space line."""

        import re

        aliases = aliases or default_alias_table()
        for line in self.templates[key].splitlines():
            if line.startswith("Available Action Space:"):
                found = set()
                for interior in re.findall(r"<([^<>]+)>", line):
                    signal = aliases.lookup(interior)
                    if signal is not None:
                        found.add(signal)
                return frozenset(found)
        return frozenset()


@dataclass(frozen=True)
class RepairOutcome:
    """Result of one repair episode: cleaned cells or a diagnostic report."""

    kind: str  # "success" | "failure"
    cells: tuple[Cell, ...]
    episode_turns: int
    resolved_error: dict | None = None
    forced: bool = False


@dataclass
class SessionDeps:
    provider: Provider
    tools: tuple[ToolDescriptor, ...] = ()
    executor_factory: Callable[[SessionConfig], KernelHandle] | None = None
    env_info: str | None = None


@dataclass
class SessionResult:
    outcome: Outcome
    history: ContextHistory
    transcript: Transcript
    counters: Counters
    wall_time: float
    cost: Decimal
    stop_rule: str | None
    final_summary: str
    session: "Session"


class ParseExhausted(Exception):
    """A turn never produced a parseable action within the retry budget."""


class SessionDead(Exception):
    pass


class ExecutorCrashed(Exception):
    pass


@dataclass
class _Episode:
    """Live bookkeeping for one repair episode."""

    node_id: str
    resume: AgentState
    error: dict | None
    chain: int = 1
    turns: list[Cell] = field(default_factory=list)
    attempts: int = 0
    forced_filter: bool = False


def build_env_info(config: SessionConfig, tool_names: Sequence[str] = ()) -> str:
    """Markdown environment card injected at initialization.

    Deliberately free of absolute paths so recorded sessions replay from any
    scratch directory.
    """

    lines = [
        "## Environment",
        "",
        f"- Interpreter: {platform.python_implementation()} {platform.python_version()} on {platform.system()}",
        f"- Code cells run in a persistent `{config.language_tag}` kernel; variables survive across cells.",
        "- The working directory is the task directory; write outputs below it using relative paths.",
    ]
    if tool_names:
        joined = ", ".join(tool_names)
        lines.append(f"- Available tools: {joined} (see tool cells below).")
    return "\n".join(lines)


_STAGE_ORIGIN = {
    AgentState.PLAN: OriginStage.PLAN,
    AgentState.EXEC: OriginStage.EXEC,
    AgentState.DEBUG: OriginStage.DEBUG,
    AgentState.FILTER: OriginStage.FILTER,
}

_PROGRESS_SIGNAL = {AgentState.EXEC: Signal.AWAIT, AgentState.PLAN: Signal.ADVANCE_NEXT_STEP}


def _signal_record(signal: ActionSignal, implicit: bool = False) -> dict:
    record = {"canonical": signal.canonical.value, "raw": signal.raw}
    if implicit:
        record["implicit"] = True
    return record


def _cells_json(cells: Sequence[Cell]) -> list[dict]:
    return [c.to_json() for c in cells]


class Session:
    """One orchestrated task session over a live execution kernel."""

    def __init__(
        self,
        config: SessionConfig,
        deps: SessionDeps,
        *,
        transcript_path: str | Path | None = None,
        catalog: PromptCatalog | None = None,
    ) -> None:
        self.config = config
        self.deps = deps
        self.aliases = default_alias_table()
        if catalog is not None:
            self.catalog = catalog
        elif config.prompt_dir:
            self.catalog = PromptCatalog.from_dir(config.prompt_dir)
        else:
            self.catalog = PromptCatalog.default()
        workdir = Path(config.workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        if transcript_path is None:
            transcript_path = workdir / "transcript.jsonl"
        self.transcript = Transcript(transcript_path)
        self.counters = Counters()
        self.ledger = CostLedger()
        self.state = AgentState.IDLE
        self.closed = False
        self._cell_ids: Iterator[str] = (f"c{i}" for i in itertools.count(1))
        self._episode: _Episode | None = None
        self._pending_episode: _Episode | None = None
        self._initial_pending = True
        self._outcome: Outcome | None = None
        self._stop_rule: str | None = None
        self._final_summary = ""
        self._run_started = 0.0
        self._wall_time = 0.0
        self.visual_state = VisualToolState()

        factory = deps.executor_factory or (
            lambda cfg: executor_mod.start_session(cfg.backend, cfg.workdir)
        )
        self.handle = factory(config)
        self._env_info = deps.env_info or build_env_info(config, [t.name for t in deps.tools])
        preamble: PreambleResult = inject_tools(
            deps.tools,
            self._env_info,
            handle=self.handle,
            language_tag=config.language_tag,
            ids=self._cell_ids,
        )
        self.history = ContextHistory(preamble=preamble.cells)
        self.disabled_tools = preamble.disabled

    # ------------------------------------------------------------------ events

    def _emit(self, type: str, payload: dict) -> Event:
        return self.transcript.append(type, payload)

    def _emit_transition(
        self,
        from_state: AgentState | str,
        signal: Signal | None,
        feedback: Feedback | None,
        to_state: AgentState,
        *,
        synthetic: bool = False,
        ablated: bool = False,
    ) -> None:
        payload: dict = {
            "from": from_state.value if isinstance(from_state, AgentState) else from_state,
            "signal": signal.value if signal is not None else None,
            "feedback": feedback.to_json() if feedback is not None else None,
            "to": to_state.value,
        }
        if synthetic:
            payload["synthetic"] = True
        if ablated:
            payload["ablated"] = True
        self._emit("transition", payload)

    # ------------------------------------------------------------------ lifecycle

    def run(self, instruction: str) -> SessionResult:
        """Drive one instruction from idle back to idle (or a stop)."""

        if self.closed:
            raise SessionDead("session is closed")
        if not instruction or not instruction.strip():
            raise ValueError("instruction must be non-empty")
        if self.state is not AgentState.IDLE:
            raise SessionDead("session is mid-run")

        self._run_started = time.monotonic()
        self._outcome = None
        self._stop_rule = None
        if self.transcript.events(0) == []:
            self._emit_preamble()
        self._emit(
            "user_input",
            {
                "instruction": instruction,
                "config": self.config.to_json(),
                "tools": [t.to_json() for t in self.deps.tools],
                "env_info": self._env_info,
            },
        )
        self.history.add_instruction(instruction)
        self._initial_pending = True
        self.visual_state.reset()
        self._enter_from_idle()
        if self.state is not AgentState.IDLE:
            self._loop()
        return self._result()

    def resume(self, followup: str) -> SessionResult:
        """Re-enter planning with a follow-up instruction after reaching idle."""

        if self.closed or not self.handle.alive:
            raise SessionDead("session is not resumable")
        if self._outcome is Outcome.ABORTED:
            raise SessionDead("aborted sessions cannot be resumed")
        if not followup or not followup.strip():
            raise ValueError("follow-up must be non-empty")
        self.counters.reset_step()
        return self.run(followup)

    def _emit_preamble(self) -> None:
        self._emit(
            "action",
            {
                "stage": "init",
                "signal": None,
                "cells": _cells_json(self.history.preamble),
                "node_id": None,
                "tree_op": None,
            },
        )

    def _enter_from_idle(self) -> None:
        decision = apply_budgets(AgentState.PLAN, self.counters, self.config.budgets)
        self._emit_transition("idle", None, None, AgentState.PLAN)
        if decision.forced is not None:
            self._emit(
                "forced",
                {
                    "from": AgentState.PLAN.value,
                    "to": decision.state.value,
                    "rules": list(decision.forced.rules),
                    "synthetic_signal": decision.forced.synthetic_signal.value,
                },
            )
            self.history.tree.complete_current_step()
            self._finish(Outcome.BUDGET_STOP, decision.forced.rules[-1])
            return
        self.state = AgentState.PLAN
        self._entry_bookkeeping(AgentState.PLAN)

    # ------------------------------------------------------------------ main loop

    def _loop(self) -> None:
        while self.state is not AgentState.IDLE:
            if self._over_deadline():
                self._finish(Outcome.TIMEOUT, "timeout")
                return
            try:
                action = self._generate_turn(self.state)
            except ParseExhausted as exc:
                if self._handle_parse_exhausted(str(exc)):
                    continue
                return
            except ReplayDivergence:
                self._finish(Outcome.ABORTED, "replay_divergence")
                raise
            except GatewayError as exc:
                self._finish(Outcome.ABORTED, f"llm_unavailable: {exc}")
                return

            node, observations, action = self._attach_node(action)
            self._emit(
                "action",
                {
                    "stage": self.state.value,
                    "signal": _signal_record(action.signal),
                    "cells": _cells_json(action.cells),
                    "observations": _cells_json(observations),
                    "node_id": node.id if node else None,
                    "tree_op": self._tree_op,
                    "goal_text": node.goal_text if node else None,
                },
            )

            try:
                executed, result = self._execute(action, node)
            except (KernelDead, ExecutorCrashed) as exc:
                self._finish(Outcome.ABORTED, f"executor_crashed: {exc}")
                return

            if self._over_deadline():
                self._finish(Outcome.TIMEOUT, "timeout")
                return
            self._after_turn(executed, node, result.feedback)

    def _over_deadline(self) -> bool:
        return time.monotonic() - self._run_started >= self.config.task_timeout_s

    def _execute(self, action: Action, node: TrajectoryNode | None) -> tuple[Action, ExecResult]:
        remaining = self.config.task_timeout_s - (time.monotonic() - self._run_started)
        result = self.handle.execute_cells(action.cells, max(0.1, remaining))
        executed_cells = tuple(
            cell if not outputs else cell.with_outputs(outputs)
            for cell, outputs in zip(action.cells, result.cell_outputs)
        )
        executed = dataclasses.replace(action, cells=executed_cells)
        if node is not None:
            self.history.tree.record_execution(node.id, executed, error=result.feedback.is_error)
        self._emit(
            "execution",
            {
                "stage": self.state.value,
                "node_id": node.id if node else None,
                "cells": _cells_json(executed.cells),
                "feedback": result.feedback.to_json(),
                "elapsed": result.elapsed,
                "aborted_at_cell": result.aborted_at_cell,
            },
        )
        return executed, result

    # ------------------------------------------------------------------ turn generation

    def _template_key(self, stage: AgentState) -> str:
        if stage is AgentState.PLAN:
            if self._initial_pending:
                return "initial"
            return "planning_linear" if self.config.ablations.disable_planning else "planning"
        return {
            AgentState.EXEC: "execution",
            AgentState.DEBUG: "debugging",
            AgentState.FILTER: "filtering",
        }[stage]

    def _admissible(self, stage: AgentState) -> frozenset[Signal]:
        allowed = admissible_signals(stage)
        if stage is AgentState.PLAN and self.config.ablations.disable_planning:
            allowed = allowed - {Signal.ITERATE_CURRENT_STEP}
        return allowed

    def _generate_turn(self, stage: AgentState) -> Action:
        """One parsed action; malformed replies get a one-line reminder and a retry."""

        step = self.history.tree.current_step()
        prompt = self.catalog.render(
            self._template_key(stage),
            instruction=self.history.latest_instruction,
            step_goal=step.goal_text if step is not None else "",
            language_tag=self.config.language_tag,
        )
        episode_cells = list(self._episode.turns) if self._episode else []
        messages = assemble_context(
            self.history,
            stage,
            self.config.truncation,
            stage_prompt=prompt,
            episode_cells=episode_cells,
        )
        last_error: ParseError | None = None
        for attempt in range(self.config.retry_on_parse_error + 1):
            completion = complete(messages, self.config.params, self.deps.provider)
            self.counters.llm_calls += 1
            self.ledger.add(self.config.model, completion.usage, self.config.price_table)
            self._emit(
                "llm_call",
                {
                    "request_hash": request_hash(self.config.params, messages),
                    "reply": completion.text,
                    "usage": completion.usage.to_json(),
                    "model": self.config.model,
                    "temperature": self.config.temperature,
                    "retry_index": attempt,
                },
            )
            try:
                action = self._parse(completion.text, stage)
                if stage is AgentState.PLAN:
                    self._initial_pending = False
                return action
            except ParseError as exc:
                last_error = exc
                reminder = (
                    f"Format error: {exc} Reply again. Your response MUST start with exactly "
                    f"one admissible action signal, followed by fenced markdown/"
                    f"{self.config.language_tag} cells."
                )
                messages = list(messages) + [
                    ChatMessage("assistant", completion.text or "(empty)"),
                    ChatMessage("user", reminder),
                ]
        raise ParseExhausted(str(last_error))

    def _parse(self, text: str, stage: AgentState) -> Action:
        if stage is AgentState.PLAN and self._initial_pending:
            return self._parse_initial(text)
        return parse_action(
            text,
            stage,
            self.aliases,
            language_tag=self.config.language_tag,
            ids=self._cell_ids,
            admissible=self._admissible(stage),
        )

    def _parse_initial(self, text: str) -> Action:
        """The first reply carries no signal token; it is an implicit advance."""

        from .cellmodel import MissingStepGoal, _SIGNAL_RE  # noqa: PLC2701

        if _SIGNAL_RE.match(text) and self.aliases.lookup(
            _SIGNAL_RE.match(text).group("interior")
        ):
            return parse_action(
                text,
                AgentState.PLAN,
                self.aliases,
                language_tag=self.config.language_tag,
                ids=self._cell_ids,
                admissible=self._admissible(AgentState.PLAN),
            )
        cells = parse_cells(
            text,
            language_tag=self.config.language_tag,
            origin=OriginStage.PLAN,
            ids=self._cell_ids,
        )
        if step_goal_text(cells) is None:
            raise MissingStepGoal(
                'the first response must contain a markdown cell starting with "[STEP GOAL]:"'
            )
        return Action(
            signal=ActionSignal.implicit(Signal.ADVANCE_NEXT_STEP),
            cells=tuple(cells),
            stage=AgentState.PLAN,
        )

    # ------------------------------------------------------------------ tree attach

    def _attach_node(
        self, action: Action
    ) -> tuple[TrajectoryNode | None, tuple[Cell, ...], Action]:
        """Grow the tree for a planning/execution turn.

        Returns (node, observation cells, effective action): a backtrack
        turn's leading observation cells move onto the node front, so the
        effective action carries only the remaining cells.
        """

        self._tree_op: str | None = None
        tree = self.history.tree
        stage = self.state
        signal = action.signal.canonical
        if stage is AgentState.PLAN:
            if signal is Signal.ADVANCE_NEXT_STEP:
                goal = step_goal_text(action.cells) or ""
                node = tree.advance(goal, action)
                self.counters.nonroot_nodes += 1
                self.counters.reset_step()
                self._tree_op = "advance"
                return node, (), action
            if signal is Signal.ITERATE_CURRENT_STEP:
                observations, rest = self._split_observations(action)
                trimmed = dataclasses.replace(action, cells=rest)
                goal = step_goal_text(rest) or ""
                node = tree.backtrack_replace(observations, goal, trimmed)
                self.counters.nonroot_nodes += 1
                self.counters.reset_step()
                self._tree_op = "backtrack"
                return node, observations, trimmed
            if action.cells:
                node = tree.add_turn(action)
                self.counters.nonroot_nodes += 1
                self._tree_op = "turn"
                return node, (), action
            return None, (), action
        if stage is AgentState.EXEC and action.cells:
            node = tree.add_turn(action)
            self.counters.nonroot_nodes += 1
            self._tree_op = "turn"
            return node, (), action
        return None, (), action

    @staticmethod
    def _split_observations(action: Action) -> tuple[tuple[Cell, ...], tuple[Cell, ...]]:
        """Markdown cells before the step-goal cell are backtrack observations."""

        for index, cell in enumerate(action.cells):
            if cell.kind is CellKind.MARKDOWN and step_goal_text([cell]) is not None:
                return action.cells[:index], action.cells[index:]
        return (), action.cells

    # ------------------------------------------------------------------ transitions

    def _entry_bookkeeping(self, state: AgentState) -> None:
        if state is AgentState.PLAN:
            self.counters.planning_entries += 1
            self.history.tree.complete_current_step()
        elif state is AgentState.EXEC:
            self.counters.exec_entries_current_step += 1
        elif state is AgentState.DEBUG:
            self.counters.debug_attempts_current_episode += 1
            if self._episode is not None:
                self._episode.attempts += 1

    def _set_state(self, raw_target: AgentState) -> None:
        starting_episode = (
            raw_target is AgentState.DEBUG and self._pending_episode is not None
        )
        if starting_episode:
            self.counters.reset_episode()
        decision = apply_budgets(raw_target, self.counters, self.config.budgets)
        if decision.forced is not None:
            self._emit(
                "forced",
                {
                    "from": raw_target.value,
                    "to": decision.state.value,
                    "rules": list(decision.forced.rules),
                    "synthetic_signal": decision.forced.synthetic_signal.value,
                },
            )
            if "debug_budget" in decision.forced.rules and self._episode is not None:
                self._episode.forced_filter = True
        state = decision.state
        if state is AgentState.DEBUG and starting_episode:
            self._episode = self._pending_episode
            self.counters.repair_episodes += 1
        self._pending_episode = None
        if state is AgentState.IDLE:
            self.history.tree.complete_current_step()
            if decision.forced is not None:
                self._finish(Outcome.BUDGET_STOP, decision.forced.rules[-1])
            else:
                self._finish(Outcome.FULFILLED, None)
            return
        self.state = state
        if state in (AgentState.PLAN, AgentState.EXEC):
            self._episode = None
        self._entry_bookkeeping(state)

    def _after_turn(self, executed: Action, node: TrajectoryNode | None, feedback: Feedback) -> None:
        stage = self.state
        signal = executed.signal.canonical

        if stage is AgentState.DEBUG and self._episode is not None:
            self._episode.turns.extend(executed.cells)

        if stage is AgentState.FILTER:
            self._finish_filter(executed, feedback)
            return

        if feedback.is_error and stage in (AgentState.PLAN, AgentState.EXEC):
            if self.config.ablations.disable_repair:
                target = compute_resume(stage, signal)
                self._emit_transition(stage, signal, feedback, target, ablated=True)
                if signal is Signal.FULFIL_INSTRUCTION:
                    self._capture_summary(executed)
                self._set_state(target)
                return
            if node is None:
                # Nothing executable failed without a node only if the action
                # had no cells; treat as a no-error transition.
                feedback = Feedback.ok()
            else:
                self._pending_episode = _Episode(
                    node_id=node.id,
                    resume=compute_resume(stage, signal),
                    error=feedback.detail.to_json() if feedback.detail else None,
                )

        if signal is Signal.FULFIL_INSTRUCTION and not feedback.is_error:
            self._capture_summary(executed)

        target = next_state(stage, signal, feedback)
        self._emit_transition(stage, signal, feedback, target)
        self._set_state(target)

    def _capture_summary(self, executed: Action) -> None:
        parts = [c.source for c in executed.cells if c.kind is CellKind.MARKDOWN]
        self._final_summary = "\n\n".join(parts)

    # ------------------------------------------------------------------ repair

    def _episode_action(
        self, cells: Sequence[Cell], signal: Signal, raw: str | None = None
    ) -> Action:
        return Action(
            signal=ActionSignal(signal, raw or canonical_token(signal)),
            cells=tuple(cells),
            stage=AgentState.FILTER,
        )

    def _emit_repair(
        self,
        kind: str,
        replacement: Action,
        *,
        forced: bool = False,
        chained: bool = False,
        revalidation_error: dict | None = None,
    ) -> None:
        ep = self._episode
        assert ep is not None
        payload = {
            "kind": kind,
            "node_id": ep.node_id,
            "replacement": {
                "stage": replacement.stage.value,
                "signal": _signal_record(replacement.signal),
                "cells": _cells_json(replacement.cells),
            },
            "episode_turns": ep.attempts,
            "resolved_error": ep.error,
            "forced": forced or ep.forced_filter,
        }
        if chained:
            payload["chained"] = True
        if revalidation_error is not None:
            payload["revalidation_error"] = revalidation_error
        self._emit("repair_outcome", payload)

    def _finish_filter(self, executed: Action, feedback: Feedback) -> None:
        ep = self._episode
        assert ep is not None, "post-filter turn outside a repair episode"
        signal = executed.signal.canonical
        tree = self.history.tree

        if signal is Signal.DEBUG_SUCCESS:
            tree.splice_success(ep.node_id, executed)
            if not feedback.is_error:
                self._emit_repair("success", executed, chained=ep.chain > 1)
                self._emit_transition(AgentState.FILTER, signal, feedback, ep.resume)
                self._set_state(ep.resume)
                return
            # The "clean" code still fails.
            detail = feedback.detail.to_json() if feedback.detail else None
            if ep.chain < self.config.budgets.max_repair_episodes and ep.resume is not AgentState.IDLE:
                self._emit_repair(
                    "success", executed, chained=ep.chain > 1, revalidation_error=detail
                )
                self._emit_transition(AgentState.FILTER, signal, feedback, ep.resume)
                synthetic = _PROGRESS_SIGNAL[ep.resume]
                self._emit_transition(
                    ep.resume, synthetic, feedback, AgentState.DEBUG, synthetic=True
                )
                self._pending_episode = _Episode(
                    node_id=ep.node_id,
                    resume=ep.resume,
                    error=detail,
                    chain=ep.chain + 1,
                )
                self._set_state(AgentState.DEBUG)
                return
            report = self._synthetic_report(
                "The repaired code still fails after the allowed repair episodes.", detail
            )
            tree.splice_failure(ep.node_id, report)
            self._emit_repair("failure", report, forced=True, revalidation_error=detail)
            self._emit_transition(AgentState.FILTER, signal, feedback, ep.resume)
            self._set_state(ep.resume)
            return

        # Debug failure: one markdown diagnostic report replaces the turn.
        report = self._merge_report(executed)
        tree.splice_failure(ep.node_id, report)
        self._emit_repair("failure", report)
        self._emit_transition(AgentState.FILTER, signal, feedback, ep.resume)
        self._set_state(ep.resume)

    def _merge_report(self, executed: Action) -> Action:
        sources = [c.source for c in executed.cells if c.kind is CellKind.MARKDOWN]
        body = "\n\n".join(sources) if sources else "Debugging failed; no report was produced."
        cell = Cell(
            next(self._cell_ids),
            CellKind.MARKDOWN,
            body,
            self.config.language_tag,
            (),
            OriginStage.FILTER,
        )
        return self._episode_action([cell], Signal.DEBUG_FAILURE, executed.signal.raw)

    def _synthetic_report(self, reason: str, detail: dict | None) -> Action:
        body = f"### Repair report\n\n{reason}"
        if detail:
            body += f"\n\nLast error: `{detail.get('name')}: {detail.get('value')}`"
        cell = Cell(
            next(self._cell_ids),
            CellKind.MARKDOWN,
            body,
            self.config.language_tag,
            (),
            OriginStage.FILTER,
        )
        return self._episode_action([cell], Signal.DEBUG_FAILURE)

    # ------------------------------------------------------------------ parse fallbacks

    def _handle_parse_exhausted(self, detail: str) -> bool:
        """Abort the turn gracefully; returns True when the loop continues."""

        stage = self.state
        if stage is AgentState.FILTER:
            ep = self._episode
            assert ep is not None
            report = self._synthetic_report(
                "Post-filtering produced no parseable result; treating the episode as failed.",
                ep.error,
            )
            self.history.tree.splice_failure(ep.node_id, report)
            self._emit_repair("failure", report, forced=True)
            self._emit_transition(
                AgentState.FILTER, Signal.DEBUG_FAILURE, Feedback.ok(), ep.resume, synthetic=True
            )
            self._set_state(ep.resume)
            return self.state is not AgentState.IDLE
        if stage is AgentState.EXEC:
            self._emit_transition(
                AgentState.EXEC, Signal.END_STEP, Feedback.ok(), AgentState.PLAN, synthetic=True
            )
            self._set_state(AgentState.PLAN)
            return self.state is not AgentState.IDLE
        if stage is AgentState.DEBUG:
            self._emit_transition(
                AgentState.DEBUG, Signal.END_DEBUG, Feedback.ok(), AgentState.FILTER, synthetic=True
            )
            self._set_state(AgentState.FILTER)
            return self.state is not AgentState.IDLE
        self._finish(Outcome.ABORTED, f"parse_exhausted: {detail}")
        return False

    # ------------------------------------------------------------------ finish

    def _finish(self, outcome: Outcome, stop_rule: str | None) -> None:
        self.state = AgentState.IDLE
        self._outcome = outcome
        elapsed = time.monotonic() - self._run_started
        if outcome is Outcome.TIMEOUT:
            elapsed = self.config.task_timeout_s
        self._wall_time = elapsed
        self._episode = None
        self._emit(
            "final",
            {
                "outcome": outcome.value,
                "stop_rule": stop_rule,
                "wall_time": elapsed,
                "counters": self.counters.to_json(),
                "cost": str(self.ledger.total()),
                "final_summary": self._final_summary,
            },
        )
        self._stop_rule = stop_rule

    def _result(self) -> SessionResult:
        assert self._outcome is not None
        return SessionResult(
            outcome=self._outcome,
            history=self.history,
            transcript=self.transcript,
            counters=self.counters,
            wall_time=self._wall_time,
            cost=self.ledger.total(),
            stop_rule=self._stop_rule,
            final_summary=self._final_summary,
            session=self,
        )

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.handle.close()
            finally:
                self.transcript.close()

    # ------------------------------------------------------------------ recovery

    @classmethod
    def from_transcript(
        cls,
        events: Sequence[Event],
        config: SessionConfig,
        deps: SessionDeps,
        *,
        transcript_path: str | Path | None = None,
    ) -> "Session":
        """Restore a finished session by re-executing its active-path code cells."""

        from .trajectory import rebuild_tree

        session = cls(config, deps, transcript_path=transcript_path)
        session.transcript.preload(events)
        tree = rebuild_tree([e.to_json() for e in events])
        for cell in tree.active_cells():
            if cell.kind is CellKind.CODE:
                session.handle.execute_cells([cell])
        session.history.tree = tree
        for event in events:
            if event.type == "user_input":
                session.history.add_instruction(event.payload["instruction"])
            elif event.type == "final":
                session._outcome = Outcome(event.payload["outcome"])
        session._cell_ids = (f"c{i}" for i in itertools.count(1 + _max_cell_index(events)))
        counters = replay_counters(events)
        counters.nonroot_nodes = tree.count_nonroot()
        session.counters = counters
        return session


def _max_cell_index(events: Sequence[Event]) -> int:
    top = 0
    for event in events:
        for record in event.payload.get("cells", []) if isinstance(event.payload, dict) else []:
            cid = record.get("id", "")
            if cid.startswith("c") and cid[1:].isdigit():
                top = max(top, int(cid[1:]))
    return top


def replay_counters(events: Sequence[Event]) -> Counters:
    """Recompute cumulative counters from a transcript."""

    counters = Counters()
    records = [e.to_json() if isinstance(e, Event) else e for e in events]
    for i, record in enumerate(records):
        etype, payload = record["type"], record["payload"]
        if etype == "llm_call":
            counters.llm_calls += 1
        elif etype == "transition":
            target = payload["to"]
            follows_forced = i + 1 < len(records) and records[i + 1]["type"] == "forced"
            if follows_forced:
                target = records[i + 1]["payload"]["to"]
            if target == "plan":
                counters.planning_entries += 1
            elif target == "debug" and payload["from"] != "debug":
                counters.repair_episodes += 1
    return counters


def run_task(instruction: str, config: SessionConfig, deps: SessionDeps) -> SessionResult:
    """Run one instruction in a fresh session (the session stays open)."""

    session = Session(config, deps)
    return session.run(instruction)


def replay_transcript(
    events: Sequence[Event],
    workdir: str | Path,
    *,
    transcript_path: str | Path | None = None,
) -> SessionResult:
    """Re-run a recorded session against its own replies in a scratch workdir.

    Raises :class:`llmgateway.ReplayDivergence` as soon as a request no
    longer matches the recording.
    """

    inputs = [e for e in events if e.type == "user_input"]
    if not inputs:
        raise ValueError("transcript contains no user_input events")
    first = inputs[0].payload
    config = SessionConfig.from_json(first["config"])
    config = dataclasses.replace(config, workdir=str(workdir))
    provider = record_replay([e.to_json() for e in events])
    deps = SessionDeps(
        provider=provider,
        tools=tuple(ToolDescriptor.from_json(t) for t in first.get("tools", ())),
        env_info=first.get("env_info"),
    )
    session = Session(config, deps, transcript_path=transcript_path)
    try:
        result = session.run(first["instruction"])
        for later in inputs[1:]:
            result = session.resume(later.payload["instruction"])
    finally:
        session.close()
    return result


def resume_session(result: SessionResult, followup: str) -> SessionResult:
    """Continue a finished run with a follow-up instruction."""

    if result.outcome is Outcome.ABORTED:
        raise SessionDead("aborted sessions cannot be resumed")
    return result.session.resume(followup)
