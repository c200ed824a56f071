"""Acceptance criteria, one test per criterion.

Each test is the executable form of one exit criterion, pinned at its stated
tolerance; the conftest hook prints a ``[ACCEPTANCE] ... PASS/FAIL`` line per
criterion.
"""

import json
import random
import tempfile
import time
from decimal import Decimal
from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from cellflow.cellmodel import CellKind, OriginStage, Signal
from cellflow.cli import EXIT_DIVERGED, EXIT_OK, main
from cellflow.llmgateway import CompletionParams, ScriptedProvider, load_price_table
from cellflow.orchestrator import Outcome, SessionConfig, SessionDeps, Session
from cellflow.statemachine import (
    AgentState,
    Budgets,
    Feedback,
    admissible_signals,
    compute_resume,
    next_state,
)
from cellflow.toolkit import LIMIT_MESSAGE, VisualToolState, evaluate_image
from cellflow.evalharness import (
    ModelingEntry,
    QuestionResult,
    score_analysis,
    score_rpg,
    transition_stats,
)
from cellflow.transcript import load_events

from tests.conftest import (
    BOOM,
    FakeHandle,
    HAPPY_REPLIES,
    debug_entries_per_episode,
    make_session,
    never_fixing_policy,
    transitions_of,
)
from tests.test_evalharness import oracle_rpg, oracle_scores

GOAL = "```markdown\n[STEP GOAL]: First step\n```\n```python\nsetup = 1\n```"


def test_fst_table_exhaustive():
    """Criterion 1: full (state, signal, feedback) table incl. quoted anchors; <1s."""

    started = time.monotonic()
    expected = {
        (AgentState.PLAN, Signal.ADVANCE_NEXT_STEP, False): AgentState.EXEC,
        (AgentState.PLAN, Signal.ADVANCE_NEXT_STEP, True): AgentState.DEBUG,
        (AgentState.PLAN, Signal.ITERATE_CURRENT_STEP, False): AgentState.EXEC,
        (AgentState.PLAN, Signal.ITERATE_CURRENT_STEP, True): AgentState.DEBUG,
        (AgentState.PLAN, Signal.FULFIL_INSTRUCTION, False): AgentState.IDLE,
        (AgentState.PLAN, Signal.FULFIL_INSTRUCTION, True): AgentState.DEBUG,
        (AgentState.EXEC, Signal.AWAIT, False): AgentState.EXEC,
        (AgentState.EXEC, Signal.AWAIT, True): AgentState.DEBUG,
        (AgentState.EXEC, Signal.END_STEP, False): AgentState.PLAN,
        (AgentState.EXEC, Signal.END_STEP, True): AgentState.DEBUG,
        (AgentState.DEBUG, Signal.AWAIT, False): AgentState.DEBUG,
        (AgentState.DEBUG, Signal.AWAIT, True): AgentState.DEBUG,
        (AgentState.DEBUG, Signal.END_DEBUG, False): AgentState.FILTER,
        (AgentState.DEBUG, Signal.END_DEBUG, True): AgentState.FILTER,
    }
    covered = set()
    for state in (AgentState.PLAN, AgentState.EXEC, AgentState.DEBUG):
        for signal in admissible_signals(state):
            for is_err in (False, True):
                feedback = Feedback.error("E") if is_err else Feedback.ok()
                assert next_state(state, signal, feedback) is expected[(state, signal, is_err)]
                covered.add((state, signal, is_err))
    assert covered == set(expected)
    for signal in admissible_signals(AgentState.FILTER):
        for is_err in (False, True):
            feedback = Feedback.error("E") if is_err else Feedback.ok()
            for resume in (AgentState.PLAN, AgentState.EXEC, AgentState.IDLE):
                assert next_state(AgentState.FILTER, signal, feedback, resume) is resume
    # quoted anchor transitions
    assert next_state(AgentState.PLAN, Signal.ADVANCE_NEXT_STEP, Feedback.ok()) is AgentState.EXEC
    assert next_state(AgentState.EXEC, Signal.END_STEP, Feedback.ok()) is AgentState.PLAN
    assert next_state(AgentState.EXEC, Signal.AWAIT, Feedback.error("E")) is AgentState.DEBUG
    assert time.monotonic() - started < 1.0


def test_budget_exhaustion_guardrails(tmp_path):
    """Criterion 2: never-fixing run honors 7/6/8/15 and terminates; <5s."""

    started = time.monotonic()
    session = make_session(tmp_path, policy=never_fixing_policy)
    try:
        result = session.run("Do the impossible.")
        assert result.outcome in (Outcome.BUDGET_STOP, Outcome.FULFILLED)
        assert result.outcome is Outcome.BUDGET_STOP  # never-fixing cannot fulfil

        runs = debug_entries_per_episode(result)
        assert runs and all(r == 8 for r in runs), runs

        # per-step execution entries never exceed 6
        step_exec = 0
        for origin, target in transitions_of(result):
            if target == "exec":
                step_exec += 1
                assert step_exec <= 6
            elif target == "plan":
                step_exec = 0
        plan_entries = sum(1 for _, t in transitions_of(result) if t == "plan")
        assert plan_entries <= 7
        assert result.counters.planning_entries <= 7
        assert result.counters.nonroot_nodes <= 15
        assert session.history.tree.count_nonroot() <= 15
    finally:
        session.close()
    assert time.monotonic() - started < 5.0


@given(
    n_debug_turns=st.integers(min_value=0, max_value=3),
    success=st.booleans(),
    debug_errors=st.booleans(),
)
@settings(max_examples=25, deadline=None)
def test_repair_hygiene_property(n_debug_turns, success, debug_errors):
    """Criterion 3: post-repair context purity over randomized episodes."""

    debug_code = BOOM if debug_errors else "probe = 1"
    replies = [GOAL.replace("setup = 1", BOOM)]
    replies += [f"<await>\n```python\n{debug_code}\n```" for _ in range(n_debug_turns)]
    replies += ["<end_debug>"]
    if success:
        replies += ["<debug_success>\n```markdown\nfix notes\n```\n```python\nsetup = 1\n```"]
    else:
        replies += ["<debug_failure>\n```markdown\nthe diagnostic report\n```"]
    replies += ["<end_step>", "<Fulfill USER INSTRUCTION>\n```markdown\ndone\n```"]

    root = Path(tempfile.mkdtemp(prefix="hygiene-"))
    session = make_session(root, replies=replies)
    try:
        result = session.run("Randomized repair episode.")
        assert result.outcome is Outcome.FULFILLED
        cells = session.history.tree.active_cells()
        assert not any(c.origin_stage is OriginStage.DEBUG for c in cells)
        if success:
            assert any(
                c.origin_stage is OriginStage.FILTER and c.kind is CellKind.CODE
                for c in cells
            )
        else:
            reports = [c for c in cells if c.origin_stage is OriginStage.FILTER]
            assert len(reports) == 1
            assert reports[0].kind is CellKind.MARKDOWN
            assert not any(
                c.kind is CellKind.CODE and c.origin_stage is OriginStage.FILTER
                for c in cells
            )
            assert not any(
                c.kind is CellKind.CODE and BOOM in c.source for c in cells
            )
    finally:
        session.close()


def test_resume_rule_table():
    """Criterion 4: post-filter control returns to the pre-error successor."""

    cases = [
        (AgentState.PLAN, Signal.ADVANCE_NEXT_STEP, AgentState.EXEC),
        (AgentState.EXEC, Signal.AWAIT, AgentState.EXEC),
        (AgentState.EXEC, Signal.END_STEP, AgentState.PLAN),
        (AgentState.PLAN, Signal.FULFIL_INSTRUCTION, AgentState.IDLE),
    ]
    for state, signal, expected in cases:
        resume = compute_resume(state, signal)
        assert resume is expected
        # and the filter transition actually lands there
        assert next_state(AgentState.FILTER, Signal.DEBUG_SUCCESS, Feedback.ok(), resume) is expected
        assert next_state(AgentState.FILTER, Signal.DEBUG_FAILURE, Feedback.ok(), resume) is expected


def test_metrics_match_bruteforce_oracle():
    """Criterion 5: 1000 random instances, exact to 1e-12; RPG hand case; <5s."""

    started = time.monotonic()
    rng = random.Random(42)
    for _ in range(1000):
        results = [
            QuestionResult(
                f"q{i}", tuple(rng.randint(0, 1) for _ in range(rng.randint(1, 6)))
            )
            for i in range(rng.randint(1, 10))
        ]
        scores = score_analysis(results)
        pasq, abq, uasq = oracle_scores(results)
        assert abs(scores.pasq - pasq) <= 1e-12
        assert abs(scores.abq - abq) <= 1e-12
        assert abs(scores.uasq - uasq) <= 1e-12

        entries = []
        for i in range(rng.randint(1, 8)):
            b = rng.uniform(-5, 5)
            g = b + rng.choice([-1, 1]) * rng.uniform(0.5, 5)
            entries.append(
                ModelingEntry(
                    f"t{i}",
                    p=rng.uniform(min(b, g), max(b, g)),
                    b=b,
                    g=g,
                    completed=rng.random() > 0.2,
                    higher_is_better=g > b,
                )
            )
        assert abs(score_rpg(entries) - oracle_rpg(entries)) <= 1e-12

    hand = [
        ModelingEntry("a", p=5.0, b=0.0, g=10.0),
        ModelingEntry("b", p=1.0, b=2.0, g=4.0),
    ]
    assert score_rpg(hand) == pytest.approx(0.25, abs=1e-12)
    assert time.monotonic() - started < 5.0


def test_replay_determinism_and_divergence_exit_code(tmp_path):
    """Criterion 6: byte-identical normalized replay; template edit exits 4."""

    import shutil
    from importlib import resources

    prompt_dir = tmp_path / "prompts"
    prompt_dir.mkdir()
    source = resources.files("cellflow").joinpath("prompts")
    for name in ("initial", "planning", "planning_linear", "execution", "debugging", "filtering"):
        shutil.copyfile(str(source / f"{name}.txt"), prompt_dir / f"{name}.txt")

    config = tmp_path / "config.yaml"
    config.write_text(
        yaml.safe_dump(
            {
                "provider": {"kind": "scripted", "replies": HAPPY_REPLIES},
                "prompt_dir": str(prompt_dir),
                "task_timeout_s": 60.0,
            }
        )
    )
    instruction = tmp_path / "instruction.txt"
    instruction.write_text("Compute the answer.")
    workdir = tmp_path / "rec"
    assert (
        main(
            [
                "run",
                "--instruction", str(instruction),
                "--workdir", str(workdir),
                "--config", str(config),
            ]
        )
        == EXIT_OK
    )
    transcript = workdir / "transcript.jsonl"

    # identical replay (byte-compared after normalization inside the command)
    assert (
        main(["replay", "--transcript", str(transcript), "--workdir", str(tmp_path / "rp1")])
        == EXIT_OK
    )

    # one-character prompt-template edit
    target = prompt_dir / "initial.txt"
    target.write_text(target.read_text() + "!", encoding="utf-8")
    assert (
        main(["replay", "--transcript", str(transcript), "--workdir", str(tmp_path / "rp2")])
        == EXIT_DIVERGED
    )


def test_executor_state_abort_and_timeout(tmp_path):
    """Criterion 7: statefulness, first-error abort, timeout marks elapsed=limit."""

    from cellflow.cellmodel import Cell
    from cellflow.executor import LocalBackendConfig, start_session
    from cellflow.statemachine import FeedbackKind

    handle = start_session(LocalBackendConfig(), tmp_path / "probe")
    try:
        handle.execute_cells([Cell("c1", CellKind.CODE, "state_marker = 41")])
        result = handle.execute_cells([Cell("c2", CellKind.CODE, "print(state_marker + 1)")])
        assert result.cell_outputs[0][0].text == "42\n"

        result = handle.execute_cells(
            [Cell("c3", CellKind.CODE, "1/0"), Cell("c4", CellKind.CODE, "print('no')")]
        )
        assert result.feedback.kind is FeedbackKind.ERROR
        assert result.aborted_at_cell == 0
        assert result.cell_outputs[1] == ()
    finally:
        handle.close()

    # scaled 5-second task limit stands in for the 3600 s cap
    replies = [
        "```markdown\n[STEP GOAL]: Sleep\n```\n```python\nimport time\ntime.sleep(120)\n```",
    ]
    session = make_session(tmp_path, replies=replies, fake_kernel=False, task_timeout_s=5.0)
    try:
        result = session.run("Nap for too long.")
        assert result.outcome is Outcome.TIMEOUT
        assert result.wall_time == 5.0
    finally:
        session.close()


def test_visual_tool_budget(tmp_path):
    """Criterion 8: 4-call budget; literal 5th message; failures don't consume."""

    from cellflow.toolkit import ModelCallFailed

    image = tmp_path / "figure.png"
    image.write_bytes(b"\x89PNG fake")
    params = CompletionParams(model="judge")
    state = VisualToolState(global_cnt=4)

    provider = ScriptedProvider([f"feedback {i}" for i in range(4)])
    for i in range(4):
        assert (
            evaluate_image(image, "req", "query", state, provider, params)
            == f"feedback {i}"
        )
    assert state.evaluation_cnt == 4
    fifth = evaluate_image(image, "req", "query", state, provider, params)
    assert fifth == "Usage limit reached. Please manually evaluate."
    assert fifth == LIMIT_MESSAGE

    fresh = VisualToolState(global_cnt=4)
    with pytest.raises(ModelCallFailed):
        evaluate_image(image, "req", "query", fresh, ScriptedProvider([]), params)
    assert fresh.evaluation_cnt == 0


def test_transition_statistics_hand_counts(tmp_path):
    """Criterion 9: stats match hand counts; forced moves are not LLM calls."""

    # Fixture A: happy path -> 4 llm calls, 2 planning entries, 0 repairs.
    session_a = make_session(tmp_path / "a", replies=HAPPY_REPLIES)
    result_a = session_a.run("Go.")
    events_a = [e.to_json() for e in result_a.transcript.events()]
    session_a.close()

    # Fixture B: one repair episode -> 7 llm calls, 2 planning entries, 1 repair.
    replies_b = [
        GOAL.replace("setup = 1", BOOM),
        "<await>\n```python\nprobe = 1\n```",
        "<end_debug>",
        "<debug_success>\n```python\nsetup = 1\n```",
        "<await>\n```python\nmore = 1\n```",
        "<end_step>",
        "<Fulfill USER INSTRUCTION>\n```markdown\ndone\n```",
    ]
    session_b = make_session(tmp_path / "b", replies=replies_b)
    result_b = session_b.run("Go.")
    events_b = [e.to_json() for e in result_b.transcript.events()]
    session_b.close()

    stats_a = transition_stats([events_a])
    assert (stats_a.avg_llm_calls, stats_a.avg_planning_entries, stats_a.avg_repair_entries) == (4, 2, 0)
    stats_b = transition_stats([events_b])
    assert (stats_b.avg_llm_calls, stats_b.avg_planning_entries, stats_b.avg_repair_entries) == (7, 2, 1)
    both = transition_stats([events_a, events_b])
    assert (both.avg_llm_calls, both.avg_planning_entries, both.avg_repair_entries) == (5.5, 2, 0.5)

    # Fixture C: budget exhaustion -> forced transitions counted as entries,
    # never as llm calls.
    session_c = make_session(tmp_path / "c", policy=never_fixing_policy)
    result_c = session_c.run("Impossible.")
    events_c = [e.to_json() for e in result_c.transcript.events()]
    session_c.close()
    stats_c = transition_stats([events_c])
    n_llm_events = sum(1 for e in events_c if e["type"] == "llm_call")
    assert stats_c.avg_llm_calls == n_llm_events == result_c.counters.llm_calls
    forced_plan_entries = sum(
        1 for e in events_c if e["type"] == "forced" and e["payload"]["to"] == "plan"
    )
    assert forced_plan_entries > 0
    assert stats_c.avg_planning_entries == result_c.counters.planning_entries


def test_ablation_variants(tmp_path):
    """Criterion 10: repair off -> no debug/filter; planning off -> linear; both terminate."""

    from cellflow.orchestrator import Ablations

    # disable_repair: erroring cells never reach debug/filter
    session = make_session(
        tmp_path / "norepair",
        policy=never_fixing_policy,
        ablations=Ablations(disable_repair=True),
    )
    result = session.run("Break things.")
    states = set()
    for origin, target in transitions_of(result):
        states.add(origin)
        states.add(target)
    assert "debug" not in states and "filter" not in states
    assert result.outcome is Outcome.BUDGET_STOP
    session.close()

    # disable_planning: strictly linear step sequence, no replacements
    replies = [
        GOAL,
        "<end_step>",
        "<Advance to Next STEP>\n```markdown\n[STEP GOAL]: Two\n```\n```python\nb=1\n```",
        "<end_step>",
        "<Fulfill USER INSTRUCTION>\n```markdown\ndone\n```",
    ]
    session = make_session(
        tmp_path / "noplan", replies=replies, ablations=Ablations(disable_planning=True)
    )
    result = session.run("March forward.")
    assert result.outcome is Outcome.FULFILLED
    from cellflow.trajectory import NodeKind, NodeStatus

    nodes = session.history.tree.nodes.values()
    assert all(n.status is not NodeStatus.REPLACED for n in nodes)
    spine = session.history.tree.spine()
    goals = [n.goal_text for n in spine if n.kind is NodeKind.STEP_GOAL]
    assert goals == ["First step", "Two"]
    session.close()

    # both ablations still terminate under budgets
    session = make_session(
        tmp_path / "both",
        policy=never_fixing_policy,
        ablations=Ablations(disable_planning=True, disable_repair=True),
    )
    result = session.run("Chaos.")
    assert result.outcome is Outcome.BUDGET_STOP
    session.close()


def test_cost_ledger_conservation(tmp_path):
    """Criterion 11: total == sum of per-call costs incl. retries; additive."""

    prices = load_price_table({"scripted": {"input": "0.15", "output": "0.60"}})

    # Run with one parse retry so a retry call is in the ledger.
    replies = [
        "not a valid reply",
        GOAL,
        "<end_step>",
        "<Fulfill USER INSTRUCTION>\n```markdown\ndone\n```",
    ]
    session = make_session(tmp_path / "one", replies=replies, price_table=prices)
    result = session.run("Go.")
    per_call = [r.cost for r in session.ledger.records]
    assert len(per_call) == result.counters.llm_calls == 4
    assert result.cost == sum(per_call, Decimal(0))
    retry_calls = [
        e for e in result.transcript.events()
        if e.type == "llm_call" and e.payload["retry_index"] > 0
    ]
    assert retry_calls  # the retry is accounted
    session.close()

    # Additivity over a batch of tasks.
    totals = []
    ledgers = []
    for i in range(3):
        s = make_session(tmp_path / f"batch{i}", replies=HAPPY_REPLIES, price_table=prices)
        r = s.run(f"Task {i}.")
        totals.append(r.cost)
        ledgers.append(s.ledger)
        s.close()
    merged = ledgers[0].merge(ledgers[1]).merge(ledgers[2])
    assert merged.total() == sum(totals, Decimal(0))
