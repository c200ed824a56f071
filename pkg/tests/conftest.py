"""Shared fixtures: scripted providers, a fast in-process fake kernel, and
session builders used across the suite."""

from __future__ import annotations

import itertools
import time
from pathlib import Path

import pytest

from cellflow.cellmodel import Cell, CellKind, CellOutput, OutputChannel
from cellflow.executor import ExecResult, classify_feedback
from cellflow.llmgateway import ScriptedProvider
from cellflow.orchestrator import Session, SessionConfig, SessionDeps

#: Marker that makes the fake kernel fail a code cell.
BOOM = "BOOM"


class FakeHandle:
    """In-process stand-in for a kernel: instant, deterministic, stateless.

    A code cell containing ``BOOM`` fails with FakeError; anything else
    "succeeds" with a little stdout.  Good enough for orchestration tests
    that do not care about real interpreter state.
    """

    backend_kind = "fake"

    def __init__(self, workdir: str = ".") -> None:
        self.session_id = "fake-session"
        self.workdir = Path(workdir)
        self.accumulated_wall_time = 0.0
        self.alive = True
        self.executed: list[str] = []
        self.interrupts = 0
        self._n = itertools.count(1)

    def execute_cells(self, cells, per_action_timeout=None) -> ExecResult:
        per_cell: list[tuple[CellOutput, ...]] = []
        aborted = None
        for index, cell in enumerate(cells):
            if cell.kind is not CellKind.CODE:
                per_cell.append(())
                continue
            self.executed.append(cell.source)
            if BOOM in cell.source:
                per_cell.append(
                    (
                        CellOutput(
                            channel=OutputChannel.ERROR,
                            error_name="FakeError",
                            error_value="boom",
                            traceback=("Traceback: boom",),
                        ),
                    )
                )
                aborted = index
                per_cell.extend(() for _ in cells[index + 1 :])
                break
            per_cell.append(
                (CellOutput(channel=OutputChannel.STDOUT, text=f"ok {next(self._n)}\n"),)
            )
        feedback = classify_feedback(per_cell, [c.id for c in cells])
        return ExecResult(
            cell_outputs=tuple(per_cell),
            feedback=feedback,
            elapsed=0.001,
            aborted_at_cell=aborted,
        )

    def interrupt(self) -> bool:
        self.interrupts += 1
        return True

    def close(self) -> None:
        self.alive = False


HAPPY_REPLIES = [
    "```markdown\n[STEP GOAL]: Compute the answer\n```\n```python\nx = 40 + 2\nprint(x)\n```",
    "<await>\n```python\nprint(x)\n```",
    "<end_step>",
    "<Fulfill USER INSTRUCTION>\n```markdown\nThe answer is 42.\n```",
]


def never_fixing_policy(messages):
    """Per-stage scripted policy that errors everywhere and never repairs."""

    prompt = str(messages[-1].content)
    if "STEP by STEP" in prompt:
        return (
            "```markdown\n[STEP GOAL]: Attempt the task\n```\n"
            f"```python\n{BOOM}\n```"
        )
    if "Currently in the Planning Stage" in prompt:
        return (
            "<Advance to Next STEP>\n```markdown\n[STEP GOAL]: Try another angle\n```\n"
            f"```python\n{BOOM}\n```"
        )
    if "Currently in the Incremental Execution Stage" in prompt:
        return f"<await>\n```python\n{BOOM}\n```"
    if "Currently in the Debugging Stage" in prompt:
        return "<await>\n```python\nprint('inspecting')\n```"
    if "Currently in the Post-Debugging Stage" in prompt:
        return "<debug_failure>\n```markdown\nCould not fix it.\n```"
    raise AssertionError(f"unexpected stage prompt: {prompt[:80]}")


def make_session(
    tmp_path,
    replies=None,
    policy=None,
    *,
    fake_kernel: bool = True,
    tools=(),
    **config_kwargs,
) -> Session:
    provider = ScriptedProvider(replies=replies, policy=policy)
    config_kwargs.setdefault("task_timeout_s", 120.0)
    config = SessionConfig(workdir=str(tmp_path / "work"), **config_kwargs)
    deps = SessionDeps(
        provider=provider,
        tools=tuple(tools),
        executor_factory=(lambda cfg: FakeHandle(cfg.workdir)) if fake_kernel else None,
    )
    return Session(config, deps)


@pytest.fixture
def fake_session(tmp_path):
    sessions = []

    def build(replies=None, policy=None, **kwargs):
        session = make_session(tmp_path, replies=replies, policy=policy, **kwargs)
        sessions.append(session)
        return session

    yield build
    for session in sessions:
        session.close()


@pytest.fixture
def real_session(tmp_path):
    sessions = []

    def build(replies=None, policy=None, **kwargs):
        session = make_session(
            tmp_path, replies=replies, policy=policy, fake_kernel=False, **kwargs
        )
        sessions.append(session)
        return session

    yield build
    for session in sessions:
        session.close()


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""

    if report.when == "call" and "test_acceptance" in report.nodeid:
        import sys

        name = report.nodeid.split("::")[-1]
        status = "PASS" if report.passed else "FAIL"
        sys.stderr.write(f"[ACCEPTANCE] {name}: {status}\n")


def transitions_of(result):
    """(from, to_effective) pairs from a transcript, folding forced moves."""

    events = [e.to_json() for e in result.transcript.events()]
    out = []
    for i, event in enumerate(events):
        if event["type"] != "transition":
            continue
        target = event["payload"]["to"]
        if i + 1 < len(events) and events[i + 1]["type"] == "forced":
            target = events[i + 1]["payload"]["to"]
        out.append((event["payload"]["from"], target))
    return out


def debug_entries_per_episode(result):
    events = [e.to_json() for e in result.transcript.events()]
    runs, run = [], 0
    for i, event in enumerate(events):
        if event["type"] != "transition":
            continue
        target = event["payload"]["to"]
        if i + 1 < len(events) and events[i + 1]["type"] == "forced":
            target = events[i + 1]["payload"]["to"]
        if target == "debug":
            run += 1
        elif run:
            runs.append(run)
            run = 0
    if run:
        runs.append(run)
    return runs
