"""Uniform chat-completion gateway with an HTTP backend and a scripted mock.

One logical ``complete()`` call costs one budget unit regardless of token
counts or transport retries. The ledger reserves its unit before the first
attempt and releases it if every attempt fails, so the unit count always
matches the number of responses actually returned.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field

import httpx

from .errors import (
    BackendError,
    BudgetExhaustedError,
    MalformedOutputError,
    TransientBackendError,
    UsageError,
    ValidationError,
)

ROLES = ("system", "user", "assistant")

PURPOSES = (
    "reflect_short",
    "reflect_long",
    "crossover",
    "mutate",
    "paraphrase",
    "task_inference",
)

API_KEY_ENV_VAR = "REFLECTIVE_API_KEY"

RETRY_BASE_SECONDS = 1.0
RETRY_FACTOR = 2.0
MAX_ATTEMPTS = 4


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValidationError(f"{self.role} message content must be non-empty")


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float
    max_tokens: int
    purpose: str

    def __post_init__(self):
        if not self.messages:
            raise ValidationError("request needs at least one message")
        if self.temperature < 0:
            raise ValidationError("decoding temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")
        if self.purpose not in PURPOSES:
            raise ValidationError(f"unknown purpose {self.purpose!r}")

    def joined_content(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    backend_id: str
    latency_ms: float
    attempts: int

    def __post_init__(self):
        if self.attempts < 1:
            raise ValidationError("attempt count must be >= 1")


class BudgetLedger:
    """Per-purpose call counters under a hard total cap; thread-safe."""

    def __init__(self, calls_max: int, calls_used: dict[str, int] | None = None):
        if calls_max < 0:
            raise ValidationError("calls_max must be >= 0")
        self.calls_max = calls_max
        self._used = {p: 0 for p in PURPOSES}
        if calls_used:
            for purpose, n in calls_used.items():
                if purpose not in PURPOSES:
                    raise ValidationError(f"unknown purpose {purpose!r}")
                self._used[purpose] = int(n)
        self._inflight = 0
        self._lock = threading.Lock()

    @property
    def total_used(self) -> int:
        with self._lock:
            return sum(self._used.values())

    def used_for(self, purpose: str) -> int:
        with self._lock:
            return self._used[purpose]

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._used)

    def reserve(self) -> None:
        with self._lock:
            if sum(self._used.values()) + self._inflight >= self.calls_max:
                raise BudgetExhaustedError(
                    f"LLM call budget of {self.calls_max} exhausted"
                )
            self._inflight += 1

    def commit(self, purpose: str) -> None:
        with self._lock:
            self._inflight -= 1
            self._used[purpose] += 1

    def release(self) -> None:
        with self._lock:
            self._inflight -= 1


class HttpBackend:
    """OpenAI-style chat-completions client (POST /v1/chat/completions).

    Bearer token comes from the REFLECTIVE_API_KEY environment variable.
    Raises TransientBackendError for retryable failures (transport errors,
    429, 5xx) so the gateway's backoff loop can retry them.
    """

    def __init__(self, base_url: str, model: str, timeout: float = 60.0,
                 client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.backend_id = f"http:{model}"
        self._client = client or httpx.Client(timeout=timeout)

    def generate(self, request: CompletionRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {}
        api_key = os.environ.get(API_KEY_ENV_VAR)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self._client.post(
                f"{self.base_url}/v1/chat/completions", json=payload, headers=headers
            )
        except httpx.TransportError as exc:
            raise TransientBackendError(str(exc)) from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"HTTP {response.status_code}")
        if response.status_code != 200:
            raise BackendError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"unparseable completion payload: {exc}") from exc


MATCH_ALL = "*"


@dataclass(frozen=True)
class MockRule:
    """First-match-wins scripted response.

    ``matcher`` is either the catch-all "*", a purpose tag, a substring of
    the request's joined message content, or a predicate on the request.
    ``template`` is a fixed string or a function of the request.
    """

    matcher: object
    template: object

    def matches(self, request: CompletionRequest) -> bool:
        if callable(self.matcher):
            return bool(self.matcher(request))
        if self.matcher == MATCH_ALL:
            return True
        if self.matcher in PURPOSES:
            return request.purpose == self.matcher
        return str(self.matcher) in request.joined_content()

    def render(self, request: CompletionRequest) -> str:
        if callable(self.template):
            return str(self.template(request))
        return str(self.template)


class MockBackend:
    """Deterministic backend: output is a pure function of the request."""

    def __init__(self, rules: list[MockRule]):
        self.rules = list(rules)
        self.backend_id = "mock"
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, request: CompletionRequest) -> str:
        with self._lock:
            self.calls += 1
        for rule in self.rules:
            if rule.matches(request):
                return rule.render(request)
        raise BackendError("no mock rule matched (catch-all missing at runtime)")


def mock_program(rules: list[tuple[object, object]]) -> MockBackend:
    """Build a MockBackend from (matcher, template) pairs.

    The final rule must be the catch-all "*" so every request is answerable.
    """
    if not rules:
        raise ValidationError("mock program needs at least one rule")
    last_matcher = rules[-1][0]
    if last_matcher != MATCH_ALL:
        raise ValidationError('mock program must end with a catch-all ("*") rule')
    return MockBackend([MockRule(m, t) for m, t in rules])


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def digest_request(request: CompletionRequest) -> str:
    canonical = json.dumps(
        {
            "messages": [[m.role, m.content] for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "purpose": request.purpose,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return digest_text(canonical)


class Gateway:
    """Budgeted, retrying front door to whichever backend is configured.

    Thread-safe up to the configured parallelism; the ledger and the call
    log writer are both lock-guarded. ``current_epoch`` is set by the
    engine's sequential control path only.
    """

    def __init__(
        self,
        backend,
        ledger: BudgetLedger,
        call_log_path: str | None = None,
        log_bodies: bool = False,
        sleeper=time.sleep,
    ):
        self.backend = backend
        self.ledger = ledger
        self.call_log_path = call_log_path
        self.log_bodies = log_bodies
        self.current_epoch = 0
        self._sleeper = sleeper
        self._log_lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        self.ledger.reserve()
        started = time.monotonic()
        attempts = 0
        delay = RETRY_BASE_SECONDS
        last_error: Exception | None = None
        while attempts < MAX_ATTEMPTS:
            attempts += 1
            try:
                text = self.backend.generate(request)
                break
            except TransientBackendError as exc:
                last_error = exc
                if attempts >= MAX_ATTEMPTS:
                    self.ledger.release()
                    raise BackendError(
                        f"backend still failing after {attempts} attempts: {exc}"
                    ) from exc
                self._sleeper(delay)
                delay *= RETRY_FACTOR
            except Exception:
                self.ledger.release()
                raise
        else:  # pragma: no cover - loop always breaks or raises
            raise BackendError(str(last_error))

        latency_ms = (time.monotonic() - started) * 1000.0
        if not text or not text.strip():
            self.ledger.release()
            raise MalformedOutputError(
                f"backend returned empty text for purpose {request.purpose}"
            )
        self.ledger.commit(request.purpose)
        response = CompletionResponse(
            text=text,
            backend_id=self.backend.backend_id,
            latency_ms=latency_ms,
            attempts=attempts,
        )
        self._log_call(request, response)
        return response

    def _log_call(self, request: CompletionRequest, response: CompletionResponse) -> None:
        if not self.call_log_path:
            return
        record = {
            "purpose": request.purpose,
            "request_digest": digest_request(request),
            "response_digest": digest_text(response.text),
            "latency_ms": round(response.latency_ms, 3),
            "attempts": response.attempts,
            "epoch": self.current_epoch,
        }
        if self.log_bodies:
            record["messages"] = [[m.role, m.content] for m in request.messages]
            record["response_text"] = response.text
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._log_lock:
            with open(self.call_log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def build_request(
    messages: list[ChatMessage],
    purpose: str,
    temperature: float,
    max_tokens: int = 1024,
) -> CompletionRequest:
    return CompletionRequest(
        messages=tuple(messages),
        temperature=temperature,
        max_tokens=max_tokens,
        purpose=purpose,
    )
