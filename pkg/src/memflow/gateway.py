"""Single boundary to the chat model: HTTP client, scripted test backend, token counting.

Every model call in the system flows through :class:`LlmGateway.complete`;
no other module issues network traffic for inference. The gateway also owns
the token counter that all budget arithmetic is denominated in.
"""
from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .errors import BackendRefused, NetworkError

API_KEY_ENV = "MEMFLOW_API_KEY"
JUDGE_MAX_NEW_TOKENS = 8


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_message: str
    max_new_tokens: int = 256
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    backend_label: str


class TokenCounter:
    """Token counting for budget arithmetic.

    Approximate mode is ceil(4/3 x whitespace words), a standard
    words-to-tokens heuristic; it needs no tokenizer dependency and is
    deterministic. External mode posts {"text": ...} to a tokenize endpoint
    and accepts {"count": n} or {"tokens": [...]} replies, restoring exact
    accounting when a real tokenizer service is available.
    """

    def __init__(self, mode: str = "approximate", external_endpoint: str | None = None,
                 timeout: float = 10.0):
        if mode not in ("approximate", "external"):
            raise ValueError(f"unknown counter mode {mode!r}")
        if mode == "external" and not external_endpoint:
            raise ValueError("external mode requires an endpoint")
        self.mode = mode
        self.external_endpoint = external_endpoint
        self.timeout = timeout

    def count_tokens(self, text: str) -> int:
        if not text:
            return 0
        if self.mode == "approximate":
            return math.ceil(len(text.split()) * 4 / 3)
        try:
            resp = requests.post(self.external_endpoint, json={"text": text},
                                 timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except requests.RequestException as exc:
            raise NetworkError(f"tokenize endpoint failed: {exc}") from exc
        if "count" in body:
            return int(body["count"])
        return len(body.get("tokens", []))


@dataclass
class BackendReply:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class HttpChatBackend:
    """OpenAI-compatible /v1/chat/completions client."""

    def __init__(self, endpoint: str, model: str = "default", timeout: float = 60.0,
                 api_key_env: str = API_KEY_ENV):
        self.endpoint = self._normalize(endpoint)
        self.model = model
        self.timeout = timeout
        self.api_key_env = api_key_env
        self.label = f"http:{self.endpoint}"

    @staticmethod
    def _normalize(endpoint: str) -> str:
        if "/chat/completions" in endpoint:
            return endpoint
        return endpoint.rstrip("/") + "/v1/chat/completions"

    def send(self, req: ChatRequest) -> BackendReply:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_message},
            ],
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            resp = requests.post(self.endpoint, json=payload, headers=headers,
                                 timeout=self.timeout)
        except requests.Timeout as exc:
            raise TimeoutError(f"chat endpoint timed out: {exc}") from exc
        except requests.RequestException as exc:
            raise NetworkError(f"chat endpoint unreachable: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendRefused(f"HTTP {resp.status_code}: {resp.text[:200]}",
                                 status_code=resp.status_code)
        body = resp.json()
        text = body["choices"][0]["message"]["content"] or ""
        usage = body.get("usage", {})
        return BackendReply(
            text=text,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )


@dataclass
class ScriptRule:
    match: str
    reply: str
    once: bool = False


class ScriptedBackend:
    """Deterministic offline backend driven by ordered substring rules.

    The first rule whose ``match`` is a substring of the user message fires;
    an empty match string fires on anything. Rules marked ``once`` are
    consumed after firing, which makes strict reply sequences possible.
    Unmatched requests get the declared default reply ESCALATE_REQUIRED.
    """

    label = "scripted"

    def __init__(self, rules):
        normalized: list[ScriptRule] = []
        for rule in rules:
            if isinstance(rule, ScriptRule):
                normalized.append(rule)
            else:
                normalized.append(ScriptRule(*rule))
        if not normalized:
            raise ValueError("script must not be empty")
        self._rules = normalized
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [ScriptRule(r["match"], r["reply"], bool(r.get("once", False))) for r in raw]
        return cls(rules)

    def send(self, req: ChatRequest) -> BackendReply:
        with self._lock:
            self.requests.append(req)
            for i, rule in enumerate(self._rules):
                if rule.match in req.user_message:
                    if rule.once:
                        del self._rules[i]
                    return BackendReply(text=rule.reply)
        return BackendReply(text="ESCALATE_REQUIRED")


class LlmGateway:
    """Wraps a backend with retries, call counting, and token accounting.

    ``call_count`` counts logical completions (retried attempts are one
    call), which the test suite uses to assert stage invariants.
    """

    def __init__(self, backend=None, counter: TokenCounter | None = None,
                 retries: int = 2, backoff: float = 0.2):
        self.backend = backend
        self.counter = counter or TokenCounter()
        self.retries = retries
        self.backoff = backoff
        self.call_count = 0
        self._lock = threading.Lock()

    def count_tokens(self, text: str) -> int:
        return self.counter.count_tokens(text)

    def complete(self, req: ChatRequest) -> ChatResponse:
        if self.backend is None:
            raise NetworkError("no chat backend configured")
        with self._lock:
            self.call_count += 1
        last_err: Exception | None = None
        reply: BackendReply | None = None
        for attempt in range(self.retries + 1):
            try:
                reply = self.backend.send(req)
                break
            except (NetworkError, TimeoutError, BackendRefused) as exc:
                last_err = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        if reply is None:
            raise last_err
        prompt_tokens = reply.prompt_tokens
        if prompt_tokens is None:
            prompt_tokens = (self.counter.count_tokens(req.system_prompt)
                             + self.counter.count_tokens(req.user_message))
        completion_tokens = reply.completion_tokens
        if completion_tokens is None:
            completion_tokens = self.counter.count_tokens(reply.text)
        label = getattr(self.backend, "label", type(self.backend).__name__)
        return ChatResponse(text=reply.text, prompt_tokens=prompt_tokens,
                            completion_tokens=completion_tokens, backend_label=label)
