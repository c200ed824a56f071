"""State machine: admissibility, the full transition table, resume rule,
budget forcing, and determinism/termination properties."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellflow.cellmodel import Signal
from cellflow.statemachine import (
    AgentState,
    Budgets,
    Counters,
    Feedback,
    IdleHasNoSignals,
    InadmissiblePair,
    InvalidOrigin,
    RESUME_STATES,
    admissible_signals,
    apply_budgets,
    compute_resume,
    next_state,
    transition_table,
)

OK = Feedback.ok()
ERR = Feedback.error("E", "boom")

WORKING_STATES = (AgentState.PLAN, AgentState.EXEC, AgentState.DEBUG, AgentState.FILTER)


class TestAdmissibleSignals:
    def test_plan(self):
        assert admissible_signals(AgentState.PLAN) == {
            Signal.ADVANCE_NEXT_STEP,
            Signal.ITERATE_CURRENT_STEP,
            Signal.FULFIL_INSTRUCTION,
        }

    def test_exec(self):
        assert admissible_signals(AgentState.EXEC) == {Signal.AWAIT, Signal.END_STEP}

    def test_debug(self):
        assert admissible_signals(AgentState.DEBUG) == {Signal.AWAIT, Signal.END_DEBUG}

    def test_filter(self):
        assert admissible_signals(AgentState.FILTER) == {
            Signal.DEBUG_FAILURE,
            Signal.DEBUG_SUCCESS,
        }

    def test_idle_has_no_signals(self):
        with pytest.raises(IdleHasNoSignals):
            admissible_signals(AgentState.IDLE)


#: The full documented transition map: (state, signal, error?) -> next.
EXPECTED_TABLE = {
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


class TestNextState:
    def test_exhaustive_table(self):
        for (q, sigma, is_err), expected in EXPECTED_TABLE.items():
            feedback = ERR if is_err else OK
            assert next_state(q, sigma, feedback) is expected, (q, sigma, is_err)
        for sigma in (Signal.DEBUG_SUCCESS, Signal.DEBUG_FAILURE):
            for feedback in (OK, ERR):
                for resume in RESUME_STATES:
                    assert next_state(AgentState.FILTER, sigma, feedback, resume) is resume

    def test_anchor_plan_to_exec(self):
        assert next_state(AgentState.PLAN, Signal.ADVANCE_NEXT_STEP, OK) is AgentState.EXEC

    def test_anchor_exec_to_plan(self):
        assert next_state(AgentState.EXEC, Signal.END_STEP, OK) is AgentState.PLAN

    def test_anchor_error_to_debug(self):
        assert next_state(AgentState.EXEC, Signal.AWAIT, ERR) is AgentState.DEBUG

    def test_fulfil_concludes(self):
        assert next_state(AgentState.PLAN, Signal.FULFIL_INSTRUCTION, OK) is AgentState.IDLE

    def test_filter_returns_to_resume(self):
        assert (
            next_state(AgentState.FILTER, Signal.DEBUG_SUCCESS, OK, AgentState.EXEC)
            is AgentState.EXEC
        )

    def test_inadmissible_pair(self):
        with pytest.raises(InadmissiblePair):
            next_state(AgentState.PLAN, Signal.AWAIT, OK)

    def test_filter_requires_resume(self):
        with pytest.raises(InadmissiblePair):
            next_state(AgentState.FILTER, Signal.DEBUG_SUCCESS, OK)

    def test_exported_table_matches_function(self):
        rows = transition_table()
        assert len(rows) == 14 + 12  # non-filter rows + filter rows x resumes
        for row in rows:
            q = AgentState(row["state"])
            sigma = Signal(row["signal"])
            feedback = ERR if row["feedback"] == "error" else OK
            resume = AgentState(row["resume"]) if "resume" in row else None
            assert next_state(q, sigma, feedback, resume).value == row["next"]


class TestComputeResume:
    @pytest.mark.parametrize(
        "state, signal, expected",
        [
            (AgentState.PLAN, Signal.ADVANCE_NEXT_STEP, AgentState.EXEC),
            (AgentState.PLAN, Signal.ITERATE_CURRENT_STEP, AgentState.EXEC),
            (AgentState.PLAN, Signal.FULFIL_INSTRUCTION, AgentState.IDLE),
            (AgentState.EXEC, Signal.AWAIT, AgentState.EXEC),
            (AgentState.EXEC, Signal.END_STEP, AgentState.PLAN),
        ],
    )
    def test_resume_targets(self, state, signal, expected):
        assert compute_resume(state, signal) is expected

    def test_repair_cannot_nest(self):
        with pytest.raises(InvalidOrigin):
            compute_resume(AgentState.DEBUG, Signal.AWAIT)

    def test_filter_is_invalid_origin(self):
        with pytest.raises(InvalidOrigin):
            compute_resume(AgentState.FILTER, Signal.DEBUG_SUCCESS)

    def test_resume_matches_no_error_transition(self):
        for state in (AgentState.PLAN, AgentState.EXEC):
            for signal in admissible_signals(state):
                assert compute_resume(state, signal) is next_state(state, signal, OK)


class TestApplyBudgets:
    def test_debug_budget_forces_filter(self):
        counters = Counters(debug_attempts_current_episode=8)
        decision = apply_budgets(AgentState.DEBUG, counters, Budgets())
        assert decision.state is AgentState.FILTER
        assert decision.forced.rules == ("debug_budget",)
        assert decision.forced.synthetic_signal is Signal.END_DEBUG

    def test_execution_budget_forces_plan(self):
        counters = Counters(exec_entries_current_step=6)
        decision = apply_budgets(AgentState.EXEC, counters, Budgets())
        assert decision.state is AgentState.PLAN
        assert decision.forced.rules == ("execution_budget",)

    def test_planning_budget_forces_idle(self):
        counters = Counters(planning_entries=7)
        decision = apply_budgets(AgentState.PLAN, counters, Budgets())
        assert decision.state is AgentState.IDLE
        assert decision.forced.rules == ("planning_budget",)

    def test_search_budget_forces_idle(self):
        counters = Counters(nonroot_nodes=15)
        decision = apply_budgets(AgentState.EXEC, counters, Budgets())
        assert decision.state is AgentState.IDLE
        assert decision.forced.rules == ("search_budget",)

    def test_no_rule_fires_below_budgets(self):
        decision = apply_budgets(AgentState.DEBUG, Counters(), Budgets())
        assert decision.state is AgentState.DEBUG
        assert decision.forced is None

    def test_rules_cascade(self):
        counters = Counters(exec_entries_current_step=6, planning_entries=7)
        decision = apply_budgets(AgentState.EXEC, counters, Budgets())
        assert decision.state is AgentState.IDLE
        assert decision.forced.rules == ("execution_budget", "planning_budget")

    def test_unlimited_search_budget(self):
        counters = Counters(nonroot_nodes=10_000)
        budgets = Budgets(max_planning_execution_number=None)
        decision = apply_budgets(AgentState.EXEC, counters, budgets)
        assert decision.state is AgentState.EXEC

    def test_total_over_all_states(self):
        for state in (*WORKING_STATES, AgentState.IDLE):
            decision = apply_budgets(state, Counters(), Budgets())
            assert decision.state is state

    @given(
        state=st.sampled_from(WORKING_STATES),
        planning=st.integers(0, 20),
        execs=st.integers(0, 20),
        debug=st.integers(0, 20),
        nodes=st.integers(0, 40),
    )
    @settings(max_examples=300, deadline=None)
    def test_result_never_over_budget(self, state, planning, execs, debug, nodes):
        budgets = Budgets()
        counters = Counters(
            planning_entries=planning,
            exec_entries_current_step=execs,
            debug_attempts_current_episode=debug,
            nonroot_nodes=nodes,
        )
        decision = apply_budgets(state, counters, budgets)
        final = decision.state
        # entering `final` must be within budget
        if final is AgentState.DEBUG:
            assert debug < budgets.max_debug_number
        if final is AgentState.EXEC:
            assert execs < budgets.max_execution_number
        if final is AgentState.PLAN:
            assert planning < budgets.max_planning_number
        if final is not AgentState.IDLE:
            assert nodes < budgets.max_planning_execution_number


class TestDeterminism:
    @given(
        steps=st.lists(
            st.tuples(st.integers(0, 2), st.booleans()), min_size=1, max_size=60
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_replaying_signal_feedback_sequence_is_deterministic(self, steps):
        def walk():
            q = AgentState.PLAN
            seq = [q]
            resume = AgentState.EXEC
            for choice, is_err in steps:
                signals = sorted(admissible_signals(q), key=lambda s: s.value)
                sigma = signals[choice % len(signals)]
                if q in (AgentState.PLAN, AgentState.EXEC):
                    resume = compute_resume(q, sigma) if is_err else resume
                q = next_state(q, sigma, ERR if is_err else OK, resume)
                seq.append(q)
                if q is AgentState.IDLE:
                    break
            return seq

        assert walk() == walk()

    def test_no_debug_to_debug_entry_via_error(self):
        # A debug-stage error stays inside debugging via Await only; the
        # error override never applies to the debug state itself.
        assert next_state(AgentState.DEBUG, Signal.AWAIT, ERR) is AgentState.DEBUG
        assert next_state(AgentState.DEBUG, Signal.END_DEBUG, ERR) is AgentState.FILTER


class TestBudgetsValidation:
    def test_defaults(self):
        budgets = Budgets()
        assert (
            budgets.max_planning_number,
            budgets.max_execution_number,
            budgets.max_debug_number,
            budgets.max_planning_execution_number,
        ) == (7, 6, 8, 15)

    def test_positive_required(self):
        with pytest.raises(ValueError):
            Budgets(max_debug_number=0)

    def test_feedback_invariant(self):
        with pytest.raises(ValueError):
            Feedback(kind=Feedback.ok().kind, detail=ERR.detail)
