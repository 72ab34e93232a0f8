"""Completion backends: chat-completions over HTTP, scripted replay, and recording.

The engine only ever sees :class:`CompletionRequest` and :class:`CompletionResult`.
Everything vendor-specific about the wire format stays in this module.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Any, Callable, Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import httpx

from .errors import ContractError, InternalFault, ScriptExhausted, TransportError

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")

ENV_API_BASE = "REACTOD_API_BASE"
ENV_API_KEY = "REACTOD_API_KEY"
ENV_MODEL = "REACTOD_MODEL"


@dataclass(frozen=True)
class Message:
    role: str
    content: str
    # native tool-calling plumbing: assistant turns carry the call, tool turns the id it answers
    tool_calls: Tuple[Mapping[str, Any], ...] = ()
    tool_call_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise InternalFault(f"unknown message role {self.role!r}")

    def to_json(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            d["tool_calls"] = [dict(c) for c in self.tool_calls]
        if self.tool_call_id is not None:
            d["tool_call_id"] = self.tool_call_id
        return d


@dataclass(frozen=True)
class CompletionRequest:
    messages: Tuple[Message, ...]
    tool_signatures: Optional[Tuple[Mapping[str, Any], ...]] = None
    temperature: float = 0.0
    max_output_tokens: int = 1024
    # "<dialogue_id>:<turn>:<step>", lets hand-written fixtures address a step directly
    label: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.messages or self.messages[0].role != "system":
            raise InternalFault("the first message of a request must have role system")

    def fingerprint(self) -> str:
        """Content hash of everything that influences the completion (label excluded)."""
        payload = {
            "messages": [m.to_json() for m in self.messages],
            "tools": [dict(t) for t in self.tool_signatures] if self.tool_signatures else None,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class NativeCall:
    name: str
    arguments: Any
    id: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        d = {"name": self.name, "arguments": self.arguments}
        if self.id is not None:
            d["id"] = self.id
        return d


@dataclass(frozen=True)
class CompletionResult:
    text: Optional[str] = None
    native_calls: Optional[Tuple[NativeCall, ...]] = None
    output_tokens: int = 0
    estimated: bool = False

    def __post_init__(self) -> None:
        if self.text is None and not self.native_calls:
            raise ContractError("completion carries neither text nor tool calls")
        if self.output_tokens < 0:
            raise ContractError("output_tokens must be >= 0")


def estimate_tokens(text: Optional[str]) -> int:
    """Whitespace token count, used when the endpoint reports no usage."""
    return len(text.split()) if text else 0


class CompletionBackend:
    """Interface: ``complete`` must be safe to call from several threads."""

    native_tools: bool = False

    def complete(self, req: CompletionRequest) -> CompletionResult:
        raise NotImplementedError


# -- HTTP -------------------------------------------------------------------


@dataclass
class HttpBackend(CompletionBackend):
    """One POST per completion to ``{api_base}/chat/completions``."""

    api_base: str
    model: str
    api_key: Optional[str] = None
    native_tools: bool = False
    timeout: float = 60.0
    client: Optional[httpx.Client] = None

    @classmethod
    def from_env(cls, native_tools: bool = False, **kwargs) -> "HttpBackend":
        base = os.environ.get(ENV_API_BASE)
        model = os.environ.get(ENV_MODEL)
        if not base or not model:
            raise ContractError(f"{ENV_API_BASE} and {ENV_MODEL} must be set")
        return cls(base, model, os.environ.get(ENV_API_KEY), native_tools=native_tools, **kwargs)

    def _client(self) -> httpx.Client:
        if self.client is None:
            self.client = httpx.Client(timeout=self.timeout)
        return self.client

    def build_payload(self, req: CompletionRequest) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "model": self.model,
            "messages": [m.to_json() for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if self.native_tools and req.tool_signatures:
            payload["tools"] = [dict(t) for t in req.tool_signatures]
            payload["tool_choice"] = "auto"
        return payload

    def complete(self, req: CompletionRequest) -> CompletionResult:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = self.api_base.rstrip("/") + "/chat/completions"
        try:
            resp = self._client().post(url, json=self.build_payload(req), headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {url} failed: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code} from {url}")
        if resp.status_code >= 400:
            raise ContractError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ContractError("response body is not JSON") from exc
        return parse_chat_completion(body)


def parse_chat_completion(body: Any) -> CompletionResult:
    try:
        message = body["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ContractError("response lacks choices[0].message") from exc
    text = message.get("content")
    calls = []
    for tc in message.get("tool_calls") or []:
        fn = tc.get("function") if isinstance(tc, Mapping) else None
        if not isinstance(fn, Mapping) or "name" not in fn:
            raise ContractError("malformed tool_calls entry")
        calls.append(NativeCall(fn["name"], fn.get("arguments", "{}"), tc.get("id")))
    usage = body.get("usage") or {}
    tokens = usage.get("completion_tokens")
    if isinstance(tokens, int) and tokens >= 0:
        return CompletionResult(text, tuple(calls) or None, tokens, estimated=False)
    return CompletionResult(text, tuple(calls) or None, estimate_tokens(text), estimated=True)


# -- scripted replay --------------------------------------------------------


@dataclass(frozen=True)
class FixtureEntry:
    """One scripted response. ``fingerprint`` of None means "serve in sequence order"."""

    response_text: Optional[str] = None
    native_calls: Optional[Tuple[NativeCall, ...]] = None
    output_tokens: Optional[int] = None
    fingerprint: Optional[str] = None

    def result(self) -> CompletionResult:
        tokens = self.output_tokens
        estimated = tokens is None
        if tokens is None:
            tokens = estimate_tokens(self.response_text)
        return CompletionResult(self.response_text, self.native_calls, tokens, estimated)

    def to_json(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"fingerprint": self.fingerprint}
        if self.native_calls:
            d["native_calls"] = [c.to_json() for c in self.native_calls]
            if self.response_text is not None:
                d["response_text"] = self.response_text
        else:
            d["response_text"] = self.response_text
        d["output_tokens"] = self.output_tokens
        return d

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "FixtureEntry":
        calls = doc.get("native_calls")
        return cls(
            response_text=doc.get("response_text"),
            native_calls=tuple(NativeCall(c["name"], c.get("arguments", {}), c.get("id")) for c in calls)
            if calls
            else None,
            output_tokens=doc.get("output_tokens"),
            fingerprint=doc.get("fingerprint"),
        )


def load_fixture(path) -> List[FixtureEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(FixtureEntry.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ContractError(f"{path}:{n}: bad fixture line: {exc}") from exc
    return entries


def dump_fixture(entries: Iterable[FixtureEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


class ScriptedBackend(CompletionBackend):
    """Replays fixture entries.

    Entries with a fingerprint are matched against the request's content hash
    or its label (``dialogue:turn:step``) and consumed in order per key;
    entries without one are served in sequence to requests that match no key.
    Running out raises :class:`ScriptExhausted`.
    """

    def __init__(self, entries: Sequence[FixtureEntry] = (), native_tools: bool = False):
        self.native_tools = native_tools
        self._keyed: Dict[str, Deque[FixtureEntry]] = defaultdict(deque)
        self._sequence: Deque[FixtureEntry] = deque()
        for e in entries:
            if e.fingerprint:
                self._keyed[e.fingerprint].append(e)
            else:
                self._sequence.append(e)
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_file(cls, path, native_tools: bool = False) -> "ScriptedBackend":
        return cls(load_fixture(path), native_tools=native_tools)

    @classmethod
    def from_texts(cls, texts: Iterable[str], output_tokens: Optional[int] = None) -> "ScriptedBackend":
        return cls([FixtureEntry(response_text=t, output_tokens=output_tokens) for t in texts])

    def complete(self, req: CompletionRequest) -> CompletionResult:
        with self._lock:
            self.calls += 1
            for key in (req.fingerprint(), req.label):
                if key and self._keyed.get(key):
                    return self._keyed[key].popleft().result()
            if self._sequence:
                return self._sequence.popleft().result()
        raise ScriptExhausted(f"no scripted response left for request {req.label or req.fingerprint()[:12]}")


class PolicyBackend(CompletionBackend):
    """Backend driven by a Python callable; handy for stress tests and property suites."""

    def __init__(self, policy: Callable[[CompletionRequest], CompletionResult], native_tools: bool = False):
        self.policy = policy
        self.native_tools = native_tools

    def complete(self, req: CompletionRequest) -> CompletionResult:
        return self.policy(req)


# -- recording --------------------------------------------------------------


@dataclass
class RecordedExchange:
    request: CompletionRequest
    result: CompletionResult


class RecordingBackend(CompletionBackend):
    """Wraps a live backend and keeps every request/response pair."""

    def __init__(self, inner: CompletionBackend):
        self.inner = inner
        self.native_tools = inner.native_tools
        self.session: List[RecordedExchange] = []
        self._lock = threading.Lock()

    def complete(self, req: CompletionRequest) -> CompletionResult:
        result = self.inner.complete(req)
        with self._lock:
            self.session.append(RecordedExchange(req, result))
        return result


def record_and_replay(session: Sequence[RecordedExchange]) -> List[FixtureEntry]:
    """Turn a captured session into fixture entries keyed by request fingerprint."""
    return [
        FixtureEntry(
            response_text=ex.result.text,
            native_calls=ex.result.native_calls,
            output_tokens=ex.result.output_tokens,
            fingerprint=ex.request.fingerprint(),
        )
        for ex in session
    ]


def complete_with_retry(
    backend: CompletionBackend,
    req: CompletionRequest,
    retries: int = 2,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResult:
    """Retry TransportError with exponential backoff; anything else propagates at once."""
    attempt = 0
    while True:
        try:
            return backend.complete(req)
        except TransportError as exc:
            if attempt >= retries:
                raise
            delay = backoff * (2**attempt)
            log.warning("transport error (%s); retry %d in %.2fs", exc, attempt + 1, delay)
            sleep(delay)
            attempt += 1
