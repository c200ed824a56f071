"""Gateway providers, retry/backoff, usage accounting, and the cost ledger."""

from decimal import Decimal

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellflow.llmgateway import (
    ChatMessage,
    CompletionParams,
    ContextOverflow,
    CostLedger,
    EndpointConfig,
    HttpProvider,
    RateLimitedProvider,
    ReplayDivergence,
    RetryPolicy,
    ScriptedProvider,
    ScriptExhausted,
    Unavailable,
    UnknownModel,
    Usage,
    accumulate_cost,
    complete,
    load_price_table,
    record_replay,
    request_hash,
)

PARAMS = CompletionParams(model="m1", temperature=0.0)
MSGS = [ChatMessage("user", "hello")]


class TestScriptedProvider:
    def test_returns_replies_verbatim(self):
        provider = ScriptedProvider(["<await>\n```python\npass\n```"])
        completion = provider.complete(MSGS, PARAMS)
        assert completion.text == "<await>\n```python\npass\n```"
        assert completion.usage.estimated

    def test_exhaustion(self):
        provider = ScriptedProvider([])
        with pytest.raises(ScriptExhausted):
            provider.complete(MSGS, PARAMS)

    def test_policy_mode(self):
        provider = ScriptedProvider(policy=lambda msgs: f"echo:{msgs[-1].content}")
        assert provider.complete(MSGS, PARAMS).text == "echo:hello"

    def test_requires_exactly_one_mode(self):
        with pytest.raises(ValueError):
            ScriptedProvider(["a"], policy=lambda m: "b")
        with pytest.raises(ValueError):
            ScriptedProvider()


class TestHttpProvider:
    def _provider(self, handler) -> HttpProvider:
        return HttpProvider(
            EndpointConfig(base_url="http://llm.test"),
            transport=httpx.MockTransport(handler),
        )

    def test_success_round_trip(self):
        def handler(request: httpx.Request) -> httpx.Response:
            import json

            body = json.loads(request.content)
            assert body["model"] == "m1"
            assert body["messages"] == [{"role": "user", "content": "hello"}]
            return httpx.Response(
                200,
                json={
                    "choices": [{"message": {"content": "hi there"}}],
                    "usage": {"prompt_tokens": 5, "completion_tokens": 2},
                },
            )

        completion = self._provider(handler).complete(MSGS, PARAMS)
        assert completion.text == "hi there"
        assert completion.usage == Usage(5, 2)

    def test_5xx_twice_then_success(self):
        calls = {"n": 0}

        def handler(request: httpx.Request) -> httpx.Response:
            calls["n"] += 1
            if calls["n"] <= 2:
                return httpx.Response(500, text="boom")
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "ok"}}]}
            )

        provider = self._provider(handler)
        result = complete(MSGS, PARAMS, provider, RetryPolicy(max_retries=3, backoff_base_s=0.0))
        assert result.text == "ok"
        assert provider.telemetry["retries"] == 2
        assert provider.telemetry["calls"] == 3

    def test_unavailable_after_retries(self):
        def handler(request: httpx.Request) -> httpx.Response:
            return httpx.Response(503, text="down")

        provider = self._provider(handler)
        with pytest.raises(Unavailable):
            complete(MSGS, PARAMS, provider, RetryPolicy(max_retries=2, backoff_base_s=0.0))

    def test_context_overflow_reported(self):
        def handler(request: httpx.Request) -> httpx.Response:
            return httpx.Response(
                400,
                json={"error": {"message": "maximum context length exceeded", "code": "context_length_exceeded"}},
            )

        with pytest.raises(ContextOverflow):
            self._provider(handler).complete(MSGS, PARAMS)

    def test_missing_usage_is_estimated(self):
        def handler(request: httpx.Request) -> httpx.Response:
            return httpx.Response(200, json={"choices": [{"message": {"content": "abcd" * 10}}]})

        completion = self._provider(handler).complete(MSGS, PARAMS)
        assert completion.usage.estimated
        assert completion.usage.completion_tokens == 10

    def test_auth_header_from_env(self, monkeypatch):
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json={"choices": [{"message": {"content": "x"}}]})

        monkeypatch.setenv("CELLFLOW_API_KEY", "sk-test")
        self._provider(handler).complete(MSGS, PARAMS)
        assert seen["auth"] == "Bearer sk-test"


class TestRequestHash:
    def test_stable_across_equal_requests(self):
        assert request_hash(PARAMS, MSGS) == request_hash(PARAMS, [ChatMessage("user", "hello")])

    def test_sensitive_to_any_field(self):
        base = request_hash(PARAMS, MSGS)
        assert request_hash(CompletionParams(model="m2"), MSGS) != base
        assert request_hash(CompletionParams(model="m1", temperature=0.5), MSGS) != base
        assert request_hash(PARAMS, [ChatMessage("user", "hello!")]) != base


class TestReplayProvider:
    def test_replays_matching_sequence(self):
        events = [
            {
                "type": "llm_call",
                "payload": {
                    "request_hash": request_hash(PARAMS, MSGS),
                    "reply": "recorded",
                    "usage": {"prompt_tokens": 3, "completion_tokens": 1},
                },
            }
        ]
        provider = record_replay(events)
        completion = provider.complete(MSGS, PARAMS)
        assert completion.text == "recorded"
        assert completion.usage == Usage(3, 1)

    def test_divergence_on_changed_request(self):
        events = [
            {
                "type": "llm_call",
                "payload": {"request_hash": "0" * 64, "reply": "r", "usage": {}},
            }
        ]
        provider = record_replay(events)
        with pytest.raises(ReplayDivergence):
            provider.complete(MSGS, PARAMS)

    def test_empty_recording_errors_on_first_call(self):
        provider = record_replay([])
        with pytest.raises(ReplayDivergence):
            provider.complete(MSGS, PARAMS)


PRICES = load_price_table({"m1": {"input": "0.15", "output": "0.60"}})


class TestCost:
    def test_hand_case(self):
        cost = accumulate_cost(Usage(1000, 500), "m1", PRICES)
        assert cost == Decimal("0.45")

    def test_zero_usage(self):
        assert accumulate_cost(Usage(0, 0), "m1", PRICES) == Decimal("0")

    def test_unknown_model(self):
        with pytest.raises(UnknownModel):
            accumulate_cost(Usage(1, 1), "nope", PRICES)

    def test_exact_decimal_arithmetic(self):
        # 1 token at 0.or1/1K must not round to a float artifact
        table = load_price_table({"m": {"input": "0.001", "output": "0.003"}})
        assert accumulate_cost(Usage(1, 1), "m", table) == Decimal("0.000004")

    def test_ledger_total_is_sum(self):
        ledger = CostLedger()
        costs = [
            ledger.add("m1", Usage(1000, 500), PRICES),
            ledger.add("m1", Usage(10, 20), PRICES),
            ledger.add("m1", Usage(0, 0), PRICES),
        ]
        assert ledger.total() == sum(costs, Decimal(0))

    @given(
        st.lists(
            st.tuples(st.integers(0, 10_000), st.integers(0, 10_000)),
            min_size=0,
            max_size=30,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_ledger_additivity(self, usages):
        whole = CostLedger()
        first, second = CostLedger(), CostLedger()
        for i, (p, c) in enumerate(usages):
            whole.add("m1", Usage(p, c), PRICES)
            (first if i % 2 == 0 else second).add("m1", Usage(p, c), PRICES)
        assert whole.total() == first.total() + second.total()
        assert first.merge(second).total() == whole.total()


class TestRateLimit:
    def test_bucket_delays_but_passes_through(self):
        provider = RateLimitedProvider(
            ScriptedProvider(["a", "b", "c"]), capacity=2, refill_per_s=1000.0
        )
        for expected in ("a", "b", "c"):
            assert provider.complete(MSGS, PARAMS).text == expected

    def test_invalid_configuration(self):
        with pytest.raises(ValueError):
            RateLimitedProvider(ScriptedProvider(["a"]), capacity=0, refill_per_s=1)


class TestChatMessage:
    def test_rejects_empty_content(self):
        with pytest.raises(ValueError):
            ChatMessage("user", "")

    def test_rejects_unknown_role(self):
        with pytest.raises(ValueError):
            ChatMessage("tool", "x")

    def test_multimodal_parts(self):
        message = ChatMessage(
            "user",
            (
                {"type": "text", "text": "look"},
                {"type": "image_url", "image_url": {"url": "data:image/png;base64,AA=="}},
            ),
        )
        assert isinstance(message.to_json()["content"], list)
