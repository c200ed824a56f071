"""Chat-completion providers, usage accounting, and the cost ledger.

Three interchangeable providers sit behind one ``complete`` call:

* :class:`HttpProvider` — OpenAI-style HTTP JSON chat completions against a
  configurable endpoint (base URL, path, auth header), with bounded
  exponential backoff on transient transport failures.
* :class:`ScriptedProvider` — deterministic queue or policy of replies for
  tests and fixtures.
* :class:`ReplayProvider` — answers from a recorded transcript, verifying a
  request-hash sequence so replays are byte-faithful.

Costs are exact decimal arithmetic against an editable price table; the
ledger total always equals the sum of per-call costs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChatMessage:
    """One chat turn; content is text or multimodal parts (text + image)."""

    role: str
    content: str | tuple[dict, ...]

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if isinstance(self.content, str):
            if not self.content:
                raise ValueError("message content must be non-empty")
        elif not self.content:
            raise ValueError("message content must be non-empty")

    def to_json(self) -> dict:
        content = self.content if isinstance(self.content, str) else list(self.content)
        return {"role": self.role, "content": content}


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int
    estimated: bool = False

    def to_json(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "estimated": self.estimated,
        }

    @staticmethod
    def from_json(record: dict) -> "Usage":
        return Usage(
            prompt_tokens=record.get("prompt_tokens", 0),
            completion_tokens=record.get("completion_tokens", 0),
            estimated=record.get("estimated", False),
        )


@dataclass(frozen=True)
class CompletionParams:
    model: str
    temperature: float = 0.0
    max_tokens: int | None = None


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage


class GatewayError(Exception):
    pass


class Unavailable(GatewayError):
    pass


class ContextOverflow(GatewayError):
    pass


class ScriptExhausted(GatewayError):
    pass


class ReplayDivergence(GatewayError):
    pass


class UnknownModel(GatewayError):
    pass


class TransientError(GatewayError):
    """Retryable transport-level failure; surfaced as Unavailable after retries."""


class Provider(Protocol):
    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Completion: ...


def request_hash(params: CompletionParams, messages: Sequence[ChatMessage]) -> str:
    """Stable digest of model, temperature, and the full message sequence.

    Computed on messages after truncation policy, so a replay also validates
    context assembly.
    """

    body = {
        "model": params.model,
        "temperature": params.temperature,
        "messages": [m.to_json() for m in messages],
    }
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def estimate_tokens(text_len: int) -> int:
    """Character/4 heuristic for scripts without recorded usage."""

    return max(1, text_len // 4)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_base_s: float = 0.25
    backoff_cap_s: float = 8.0


def complete(
    messages: Sequence[ChatMessage],
    params: CompletionParams,
    provider: Provider,
    retry: RetryPolicy = RetryPolicy(),
) -> Completion:
    """One chat completion with bounded exponential backoff on transient failures."""

    attempt = 0
    while True:
        try:
            return provider.complete(messages, params)
        except TransientError as exc:
            attempt += 1
            if attempt > retry.max_retries:
                raise Unavailable(f"provider unavailable after {attempt - 1} retries: {exc}") from exc
            delay = min(retry.backoff_cap_s, retry.backoff_base_s * 2 ** (attempt - 1))
            logger.warning("transient completion failure (attempt %d): %s", attempt, exc)
            time.sleep(delay)


@dataclass
class EndpointConfig:
    """Where and how to reach an OpenAI-compatible chat-completions server."""

    base_url: str
    path: str = "/v1/chat/completions"
    api_key_env: str = "CELLFLOW_API_KEY"
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    timeout_s: float = 120.0

    def to_json(self) -> dict:
        return {
            "base_url": self.base_url,
            "path": self.path,
            "api_key_env": self.api_key_env,
            "auth_header": self.auth_header,
            "auth_scheme": self.auth_scheme,
            "timeout_s": self.timeout_s,
        }


class HttpProvider:
    """Chat completions over HTTP JSON (OpenAI-compatible wire format)."""

    def __init__(
        self,
        config: EndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.config = config
        self.telemetry = {"calls": 0, "retries": 0}
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.timeout_s,
            transport=transport,
        )

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            scheme = self.config.auth_scheme
            headers[self.config.auth_header] = f"{scheme} {key}".strip()
        return headers

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Completion:
        body: dict = {
            "model": params.model,
            "temperature": params.temperature,
            "messages": [m.to_json() for m in messages],
        }
        if params.max_tokens is not None:
            body["max_tokens"] = params.max_tokens
        self.telemetry["calls"] += 1
        try:
            response = self._client.post(self.config.path, json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            self.telemetry["retries"] += 1
            raise TransientError(str(exc)) from exc
        if response.status_code in (429,) or response.status_code >= 500:
            self.telemetry["retries"] += 1
            raise TransientError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            detail = _error_text(response)
            if "context" in detail.lower() and ("length" in detail.lower() or "overflow" in detail.lower()):
                raise ContextOverflow(detail)
            raise Unavailable(f"HTTP {response.status_code}: {detail}")
        payload = response.json()
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise Unavailable(f"malformed completion response: {exc}") from exc
        usage_rec = payload.get("usage") or {}
        if usage_rec:
            usage = Usage(
                prompt_tokens=usage_rec.get("prompt_tokens", 0),
                completion_tokens=usage_rec.get("completion_tokens", 0),
            )
        else:
            usage = Usage(
                prompt_tokens=estimate_tokens(sum(len(str(m.content)) for m in messages)),
                completion_tokens=estimate_tokens(len(text)),
                estimated=True,
            )
        return Completion(text=text, usage=usage)

    def close(self) -> None:
        self._client.close()


def _error_text(response: httpx.Response) -> str:
    try:
        payload = response.json()
        if isinstance(payload, dict):
            err = payload.get("error")
            if isinstance(err, dict):
                return str(err.get("message") or err.get("code") or payload)
            return str(err or payload)
    except ValueError:
        pass
    return response.text[:500]


class ScriptedProvider:
    """Deterministic provider: a fixed reply queue or a policy function."""

    def __init__(
        self,
        replies: Sequence[str] | None = None,
        policy: Callable[[Sequence[ChatMessage]], str] | None = None,
    ) -> None:
        if (replies is None) == (policy is None):
            raise ValueError("provide exactly one of replies or policy")
        self._replies = list(replies) if replies is not None else None
        self._policy = policy
        self.calls = 0

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Completion:
        if self._policy is not None:
            text = self._policy(messages)
        else:
            assert self._replies is not None
            if self.calls >= len(self._replies):
                raise ScriptExhausted(f"scripted provider out of replies after {self.calls}")
            text = self._replies[self.calls]
        self.calls += 1
        usage = Usage(
            prompt_tokens=estimate_tokens(sum(len(str(m.content)) for m in messages)),
            completion_tokens=estimate_tokens(len(text)),
            estimated=True,
        )
        return Completion(text=text, usage=usage)


class ReplayProvider:
    """Answers by matching the recorded request-hash sequence exactly."""

    def __init__(self, calls: Sequence[tuple[str, str, Usage]]) -> None:
        self._calls = list(calls)
        self._cursor = 0

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Completion:
        if self._cursor >= len(self._calls):
            raise ReplayDivergence(
                f"replay requested call {self._cursor + 1} but recording has {len(self._calls)}"
            )
        expected_hash, reply, usage = self._calls[self._cursor]
        actual = request_hash(params, messages)
        if actual != expected_hash:
            raise ReplayDivergence(
                f"request {self._cursor + 1} diverged from recording "
                f"(expected {expected_hash[:12]}, got {actual[:12]})"
            )
        self._cursor += 1
        return Completion(text=reply, usage=usage)


def record_replay(events: Sequence) -> ReplayProvider:
    """Build a replay provider from transcript ``llm_call`` events."""

    calls: list[tuple[str, str, Usage]] = []
    for event in events:
        record = event if isinstance(event, dict) else event.to_json()
        if record.get("type") != "llm_call":
            continue
        payload = record["payload"]
        calls.append(
            (
                payload["request_hash"],
                payload["reply"],
                Usage.from_json(payload.get("usage", {})),
            )
        )
    return ReplayProvider(calls)


PriceTable = dict[str, dict[str, Decimal]]


def load_price_table(record: dict) -> PriceTable:
    """Parse ``{model: {input: per-1K, output: per-1K}}`` with exact decimals."""

    table: PriceTable = {}
    for model, prices in record.items():
        table[model] = {
            "input": Decimal(str(prices["input"])),
            "output": Decimal(str(prices["output"])),
        }
    return table


def accumulate_cost(usage: Usage, model: str, price_table: PriceTable) -> Decimal:
    """Exact per-call cost: tokens/1000 times the per-direction price."""

    if model not in price_table:
        raise UnknownModel(f"model {model!r} missing from price table")
    prices = price_table[model]
    return (
        Decimal(usage.prompt_tokens) / 1000 * prices["input"]
        + Decimal(usage.completion_tokens) / 1000 * prices["output"]
    )


@dataclass(frozen=True)
class CallCost:
    model: str
    usage: Usage
    cost: Decimal


@dataclass
class CostLedger:
    """Per-call cost records; the total is exactly their sum."""

    records: list[CallCost] = field(default_factory=list)

    def add(self, model: str, usage: Usage, price_table: PriceTable | None) -> Decimal:
        if price_table and model in price_table:
            cost = accumulate_cost(usage, model, price_table)
        else:
            cost = Decimal(0)
        self.records.append(CallCost(model=model, usage=usage, cost=cost))
        return cost

    def total(self) -> Decimal:
        return sum((r.cost for r in self.records), Decimal(0))

    def merge(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(records=self.records + other.records)

    def to_json(self) -> dict:
        return {
            "total": str(self.total()),
            "calls": [
                {"model": r.model, "usage": r.usage.to_json(), "cost": str(r.cost)}
                for r in self.records
            ],
        }


class RateLimitedProvider:
    """Token-bucket wrapper; shareable across sessions."""

    def __init__(self, provider: Provider, capacity: float, refill_per_s: float) -> None:
        if capacity <= 0 or refill_per_s <= 0:
            raise ValueError("capacity and refill rate must be positive")
        self._provider = provider
        self._capacity = capacity
        self._tokens = capacity
        self._refill = refill_per_s
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def _take(self) -> float:
        with self._lock:
            now = time.monotonic()
            self._tokens = min(self._capacity, self._tokens + (now - self._stamp) * self._refill)
            self._stamp = now
            if self._tokens >= 1:
                self._tokens -= 1
                return 0.0
            return (1 - self._tokens) / self._refill

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Completion:
        while True:
            wait = self._take()
            if wait <= 0:
                break
            time.sleep(wait)
        return self._provider.complete(messages, params)
