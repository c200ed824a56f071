"""The deterministic finite-state transducer that drives a session.

Five states (idle plus the four working stages), per-stage signal alphabets,
a total transition function, and the budget rules that force transitions when
a counter hits its limit.  Everything here is a pure function over immutable
values; the orchestration loop owns all mutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from .cellmodel import Signal


class AgentState(Enum):
    IDLE = "idle"
    PLAN = "plan"
    EXEC = "exec"
    DEBUG = "debug"
    FILTER = "filter"


class FeedbackKind(Enum):
    ERROR = "error"
    NO_ERROR = "no_error"


@dataclass(frozen=True)
class ErrorDetail:
    name: str
    value: str = ""
    failing_cell_id: str | None = None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "failing_cell_id": self.failing_cell_id,
        }


@dataclass(frozen=True)
class Feedback:
    kind: FeedbackKind
    detail: ErrorDetail | None = None

    def __post_init__(self) -> None:
        if (self.kind is FeedbackKind.ERROR) != (self.detail is not None):
            raise ValueError("detail present iff feedback is an error")

    @staticmethod
    def ok() -> "Feedback":
        return Feedback(FeedbackKind.NO_ERROR)

    @staticmethod
    def error(name: str, value: str = "", failing_cell_id: str | None = None) -> "Feedback":
        return Feedback(FeedbackKind.ERROR, ErrorDetail(name, value, failing_cell_id))

    @property
    def is_error(self) -> bool:
        return self.kind is FeedbackKind.ERROR

    def to_json(self) -> dict:
        record: dict = {"kind": self.kind.value}
        if self.detail is not None:
            record["detail"] = self.detail.to_json()
        return record


@dataclass(frozen=True)
class Budgets:
    """Transition-count guardrails; values match the reference configuration."""

    max_planning_number: int = 7
    max_execution_number: int = 6
    max_debug_number: int = 8
    max_planning_execution_number: int | None = 15
    # Bound on chained repair episodes for one faulty turn (a post-filter
    # "clean" result that still errors re-enters debugging at most this
    # many times in total).
    max_repair_episodes: int = 2

    def __post_init__(self) -> None:
        for name in (
            "max_planning_number",
            "max_execution_number",
            "max_debug_number",
            "max_repair_episodes",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_planning_execution_number is not None and self.max_planning_execution_number <= 0:
            raise ValueError("max_planning_execution_number must be positive or None")

    def to_json(self) -> dict:
        return {
            "max_planning_number": self.max_planning_number,
            "max_execution_number": self.max_execution_number,
            "max_debug_number": self.max_debug_number,
            "max_planning_execution_number": self.max_planning_execution_number,
            "max_repair_episodes": self.max_repair_episodes,
        }

    @staticmethod
    def from_json(record: dict) -> "Budgets":
        return Budgets(**record)


@dataclass
class Counters:
    """Live transition counts, scoped as their budgets require."""

    planning_entries: int = 0
    exec_entries_current_step: int = 0
    debug_attempts_current_episode: int = 0
    nonroot_nodes: int = 0
    llm_calls: int = 0
    repair_episodes: int = 0

    def reset_step(self) -> None:
        self.exec_entries_current_step = 0

    def reset_episode(self) -> None:
        self.debug_attempts_current_episode = 0

    def to_json(self) -> dict:
        return {
            "planning_entries": self.planning_entries,
            "exec_entries_current_step": self.exec_entries_current_step,
            "debug_attempts_current_episode": self.debug_attempts_current_episode,
            "nonroot_nodes": self.nonroot_nodes,
            "llm_calls": self.llm_calls,
            "repair_episodes": self.repair_episodes,
        }


#: Post-filter control may only return to these states.
RESUME_STATES = frozenset({AgentState.PLAN, AgentState.EXEC, AgentState.IDLE})

ResumeTarget = AgentState


class TransitionError(Exception):
    pass


class IdleHasNoSignals(TransitionError):
    pass


class InadmissiblePair(TransitionError):
    pass


class InvalidOrigin(TransitionError):
    pass


_ADMISSIBLE: dict[AgentState, frozenset[Signal]] = {
    AgentState.PLAN: frozenset(
        {Signal.ADVANCE_NEXT_STEP, Signal.ITERATE_CURRENT_STEP, Signal.FULFIL_INSTRUCTION}
    ),
    AgentState.EXEC: frozenset({Signal.AWAIT, Signal.END_STEP}),
    AgentState.DEBUG: frozenset({Signal.AWAIT, Signal.END_DEBUG}),
    AgentState.FILTER: frozenset({Signal.DEBUG_FAILURE, Signal.DEBUG_SUCCESS}),
}


def admissible_signals(q: AgentState) -> frozenset[Signal]:
    """Signal alphabet for a working stage; idle consumes user input only."""

    if q is AgentState.IDLE:
        raise IdleHasNoSignals("idle has no action signals")
    return _ADMISSIBLE[q]


def next_state(
    q: AgentState,
    sigma: Signal,
    f: Feedback,
    resume: ResumeTarget | None = None,
) -> AgentState:
    """Total deterministic transition over admissible (state, signal, feedback).

    Execution errors in planning or execution override the signal and route
    into debugging; debug-stage errors remain observations inside debugging;
    post-filtering always returns to the precomputed resume target.
    """

    if q is AgentState.IDLE:
        raise IdleHasNoSignals("idle has no action signals")
    if sigma not in _ADMISSIBLE[q]:
        raise InadmissiblePair(f"signal {sigma.name} not admissible in {q.value}")

    if q in (AgentState.PLAN, AgentState.EXEC) and f.is_error:
        return AgentState.DEBUG

    if q is AgentState.PLAN:
        if sigma is Signal.FULFIL_INSTRUCTION:
            return AgentState.IDLE
        return AgentState.EXEC
    if q is AgentState.EXEC:
        return AgentState.EXEC if sigma is Signal.AWAIT else AgentState.PLAN
    if q is AgentState.DEBUG:
        return AgentState.DEBUG if sigma is Signal.AWAIT else AgentState.FILTER
    # q is FILTER
    if resume is None or resume not in RESUME_STATES:
        raise InadmissiblePair("post-filter transition requires a resume target")
    return resume


def compute_resume(pre_error_state: AgentState, pre_error_signal: Signal) -> ResumeTarget:
    """The state that would have followed the failed turn had it not errored."""

    if pre_error_state not in (AgentState.PLAN, AgentState.EXEC):
        raise InvalidOrigin(f"repair cannot originate from {pre_error_state.value}")
    return next_state(pre_error_state, pre_error_signal, Feedback.ok())


#: Budget rules in priority order: (name, guarded state, counter attr,
#: budget attr, forced state, synthetic signal).
_BUDGET_RULES = (
    ("debug_budget", AgentState.DEBUG, "debug_attempts_current_episode", "max_debug_number", AgentState.FILTER, Signal.END_DEBUG),
    ("execution_budget", AgentState.EXEC, "exec_entries_current_step", "max_execution_number", AgentState.PLAN, Signal.END_STEP),
    ("planning_budget", AgentState.PLAN, "planning_entries", "max_planning_number", AgentState.IDLE, Signal.FULFIL_INSTRUCTION),
)


@dataclass(frozen=True)
class ForcedMove:
    """Record of budget rules that overrode a transition, in firing order."""

    rules: tuple[str, ...]
    synthetic_signal: Signal
    target: AgentState

    def to_json(self) -> dict:
        return {
            "rules": list(self.rules),
            "synthetic_signal": self.synthetic_signal.value,
            "target": self.target.value,
        }


@dataclass(frozen=True)
class BudgetDecision:
    state: AgentState
    forced: ForcedMove | None = None


def apply_budgets(q_next: AgentState, counters: Counters, budgets: Budgets) -> BudgetDecision:
    """Override ``q_next`` wherever a counter has reached its budget.

    Rules cascade: a forced target is itself re-checked, so the returned
    state never lands in an over-budget stage.  Total; never raises.
    """

    state = q_next
    fired: list[str] = []
    synthetic = None
    progressed = True
    while progressed:
        progressed = False
        for name, guarded, counter_attr, budget_attr, target, signal in _BUDGET_RULES:
            if state is guarded and getattr(counters, counter_attr) >= getattr(budgets, budget_attr):
                fired.append(name)
                synthetic = signal
                state = target
                progressed = True
                break
        else:
            cap = budgets.max_planning_execution_number
            if state is not AgentState.IDLE and cap is not None and counters.nonroot_nodes >= cap:
                fired.append("search_budget")
                synthetic = Signal.FULFIL_INSTRUCTION
                state = AgentState.IDLE
                progressed = True
    if not fired:
        return BudgetDecision(state=state)
    return BudgetDecision(
        state=state,
        forced=ForcedMove(rules=tuple(fired), synthetic_signal=synthetic, target=state),
    )


def transition_table() -> list[dict]:
    """The full machine as JSON-ready rows: (state, signal, feedback[, resume]) -> next."""

    rows: list[dict] = []
    for q in (AgentState.PLAN, AgentState.EXEC, AgentState.DEBUG, AgentState.FILTER):
        for sigma in sorted(_ADMISSIBLE[q], key=lambda s: s.value):
            for f in (Feedback.ok(), Feedback.error("E")):
                if q is AgentState.FILTER:
                    for resume in sorted(RESUME_STATES, key=lambda s: s.value):
                        rows.append(
                            {
                                "state": q.value,
                                "signal": sigma.value,
                                "feedback": f.kind.value,
                                "resume": resume.value,
                                "next": next_state(q, sigma, f, resume).value,
                            }
                        )
                else:
                    rows.append(
                        {
                            "state": q.value,
                            "signal": sigma.value,
                            "feedback": f.kind.value,
                            "next": next_state(q, sigma, f).value,
                        }
                    )
    return rows
