"""Notebook-centric LLM agent engine.

A staged state machine drives an LLM through planning, incremental
execution, self-debugging, and post-filtering, entirely in terms of
markdown and code cells executed in a persistent kernel.  Sessions are
recorded as append-only JSONL transcripts that replay deterministically.
"""

from .cellmodel import (
    Action,
    ActionSignal,
    Cell,
    CellKind,
    CellOutput,
    OriginStage,
    OutputChannel,
    ParseError,
    SessionMeta,
    Signal,
    TruncationPolicy,
    export_notebook,
    parse_action,
    render_context,
)
from .orchestrator import (
    Ablations,
    Outcome,
    PromptCatalog,
    Session,
    SessionConfig,
    SessionDeps,
    SessionResult,
    ablate,
    replay_transcript,
    resume_session,
    run_task,
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
    transition_table,
)
from .trajectory import ContextHistory, TrajectoryTree, assemble_context

__version__ = "0.1.0"
