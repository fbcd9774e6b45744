"""Provider-neutral chat-completion backend plus a deterministic scripted double.

All provider variance collapses into the typed error classes defined here;
nothing downstream ever inspects provider-specific error text. Context
overflow in particular surfaces as :class:`ContextOverflowError`, which the
refinement loop catches to trigger trajectory truncation.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import requests

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.0
DEFAULT_MAX_TOKENS = 50_000
MAX_TRANSPORT_RETRIES = 3


class LlmError(Exception):
    """Base class for all backend failures."""


class AuthError(LlmError):
    pass


class TransportError(LlmError):
    """Transient transport failure that survived all retries."""


class ProviderError(LlmError):
    """Provider rejected the request for a non-auth, non-overflow reason."""


class ContextOverflowError(LlmError):
    """The request exceeded the model's context window."""


class ScriptExhaustedError(LlmError):
    """A scripted backend was called more times than it has entries."""


@dataclass
class ChatRequest:
    system: str
    messages: list[tuple[str, str]]  # (role, text)
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    model: str = ""

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class ChatResponse:
    text: str
    finish_reason: str = "stop"  # stop | length | error
    usage: dict | None = None


@dataclass
class ServiceConfig:
    """Connection settings for a chat-completions-compatible HTTP service."""

    base_url: str
    api_key: str
    model: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    timeout_s: float = 120.0

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> "ServiceConfig":
        env = dict(os.environ) if env is None else env
        return cls(
            base_url=env.get("OPENAI_API_BASE", ""),
            api_key=env.get("OPENAI_API_KEY", ""),
            model=env.get("LLM_MODEL", ""),
            temperature=float(env.get("LLM_TEMPERATURE", DEFAULT_TEMPERATURE)),
            max_tokens=int(env.get("LLM_MAX_TOKENS", DEFAULT_MAX_TOKENS)),
        )


_OVERFLOW_MARKERS = ("context_length_exceeded", "context window", "maximum context")


def complete(req: ChatRequest, endpoint: ServiceConfig) -> ChatResponse:
    """Synchronous chat completion with bounded retry on transient failures.

    Raises AuthError before any network call when the endpoint is
    unconfigured, ContextOverflowError when the provider signals overflow
    (either an overflow error body or finish_reason=length), and
    TransportError once retries are exhausted.
    """
    if not endpoint.api_key:
        raise AuthError("no API key configured (set OPENAI_API_KEY)")
    if not endpoint.base_url:
        raise AuthError("no API base URL configured (set OPENAI_API_BASE)")

    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    payload = {
        "model": req.model or endpoint.model,
        "messages": [{"role": "system", "content": req.system}]
        + [{"role": role, "content": text} for role, text in req.messages],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }
    headers = {"Authorization": f"Bearer {endpoint.api_key}"}

    backoff = 0.5
    last_exc: Exception | None = None
    for attempt in range(MAX_TRANSPORT_RETRIES + 1):
        try:
            resp = requests.post(
                url, json=payload, headers=headers, timeout=endpoint.timeout_s
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_exc = exc
            if attempt < MAX_TRANSPORT_RETRIES:
                logger.warning("transport failure (%s), retrying in %.1fs", exc, backoff)
                time.sleep(backoff)
                backoff *= 2
                continue
            raise TransportError(f"transport failed after retries: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {resp.status_code})")
        if resp.status_code >= 500:
            last_exc = ProviderError(f"server error HTTP {resp.status_code}")
            if attempt < MAX_TRANSPORT_RETRIES:
                time.sleep(backoff)
                backoff *= 2
                continue
            raise TransportError(f"server error persisted: HTTP {resp.status_code}")
        return _parse_completion(resp)
    raise TransportError(f"transport failed: {last_exc}")  # pragma: no cover


def _parse_completion(resp: requests.Response) -> ChatResponse:
    try:
        body = resp.json()
    except (json.JSONDecodeError, ValueError) as exc:
        raise ProviderError(f"unparseable response body: {exc}") from exc

    if resp.status_code != 200:
        message = str(body.get("error", body))
        if any(marker in message for marker in _OVERFLOW_MARKERS):
            raise ContextOverflowError(message)
        raise ProviderError(f"HTTP {resp.status_code}: {message}")

    try:
        choice = body["choices"][0]
        text = choice["message"]["content"]
        finish = choice.get("finish_reason", "stop")
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderError(f"malformed completion body: {exc}") from exc
    if finish == "length":
        # Truncated output means the window filled up; treat as overflow so
        # the caller can shrink its prompt rather than consume a cut-off
        # candidate.
        raise ContextOverflowError("completion truncated (finish_reason=length)")
    return ChatResponse(text=text, finish_reason=finish, usage=body.get("usage"))


class HttpChatBackend:
    """Chat backend bound to one HTTP endpoint."""

    def __init__(self, endpoint: ServiceConfig):
        self.endpoint = endpoint

    def complete(self, req: ChatRequest) -> ChatResponse:
        return complete(req, self.endpoint)


class Overflow:
    """Script entry marker: raise ContextOverflowError on this call."""

    def __repr__(self):
        return "OVERFLOW"


OVERFLOW = Overflow()


@dataclass
class ScriptedBackend:
    """Replays a fixed list of responses; the test double for any LLM.

    Entries are response strings, or OVERFLOW to fault-inject a context
    overflow. Calls beyond the script raise ScriptExhaustedError so a test
    can never silently loop.
    """

    script: list
    calls: list[ChatRequest] = field(default_factory=list)
    completed_calls: int = 0
    overflow_calls: int = 0

    def complete(self, req: ChatRequest) -> ChatResponse:
        self.calls.append(req)
        index = self.completed_calls + self.overflow_calls
        if index >= len(self.script):
            raise ScriptExhaustedError(
                f"scripted backend exhausted after {len(self.script)} entries"
            )
        entry = self.script[index]
        if isinstance(entry, Overflow):
            self.overflow_calls += 1
            raise ContextOverflowError("scripted overflow")
        self.completed_calls += 1
        return ChatResponse(text=str(entry))
