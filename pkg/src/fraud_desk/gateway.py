"""Uniform language-model backend interface.

Two backends speak the same ``complete()`` contract: an HTTP
chat-completions client (for live runs) and a deterministic scripted
backend that replays a recorded transcript. Token counting lives here too,
because efficiency metrics must name the ruler they were measured with.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import requests

from .errors import (
    AuthMissing,
    BackendUnavailable,
    IoFailure,
    TranscriptDivergence,
    TranscriptExhausted,
    VocabularyLoadFailure,
)

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")

# Image attachments are never counted toward token totals; metric outputs
# carry this note so offline numbers are comparable.
IMAGE_TOKENS_NOTE = "image attachments excluded from token counts"


@dataclass(frozen=True)
class ImageRef:
    path: str
    media_type: str = "image/svg+xml"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str
    attachments: tuple[ImageRef, ...] = ()
    tool_call_id: str | None = None
    tool_calls: tuple["ToolCall", ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages must carry the id of the call they answer")


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "name": self.name, "arguments": dict(self.arguments)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolCall":
        return cls(id=str(data["id"]), name=str(data["name"]),
                   arguments=dict(data.get("arguments") or {}))


@dataclass(frozen=True)
class ToolDescriptor:
    """What a backend is told about one callable tool."""

    name: str
    description: str
    parameters: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": dict(self.parameters),
        }


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("usage counts must be nonnegative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.input_tokens + other.input_tokens,
                     self.output_tokens + other.output_tokens)


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    tools: tuple[ToolDescriptor, ...] = ()
    temperature: float = 0.0
    max_output_tokens: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request must carry at least one message")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    tool_calls: tuple[ToolCall, ...] = ()
    usage: Usage = Usage()


# --- token counting ---------------------------------------------------------------


class TokenCounter(Protocol):
    name: str

    def count(self, text: str) -> int: ...


class ApproxTokenCounter:
    """Default ruler: ceil(unicode scalar values / 4). Monotone and cheap."""

    name = "approx:chars/4"

    def count(self, text: str) -> int:
        return math.ceil(len(text) / 4)


class BpeTokenCounter:
    """Byte-pair counter driven by an external rank vocabulary.

    The vocabulary file carries one ``base64(token_bytes) rank`` pair per
    line. Counting merges raw UTF-8 bytes greedily by rank; no pre-tokenizer
    is applied, so counts are a self-consistent ruler rather than a clone of
    any specific provider tokenizer.
    """

    def __init__(self, ranks: dict[bytes, int], name: str):
        self.name = name
        self._ranks = ranks

    @classmethod
    def from_vocabulary(cls, path: str | Path) -> "BpeTokenCounter":
        path = Path(path)
        ranks: dict[bytes, int] = {}
        try:
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    token_b64, rank_text = line.split()
                    ranks[base64.b64decode(token_b64, validate=True)] = int(rank_text)
                except (ValueError, TypeError) as exc:
                    raise VocabularyLoadFailure(f"{path}:{lineno}: {exc}") from exc
        except OSError as exc:
            raise VocabularyLoadFailure(f"cannot read vocabulary {path}: {exc}") from exc
        if not ranks:
            raise VocabularyLoadFailure(f"{path}: empty vocabulary")
        return cls(ranks, name=f"bpe:{path.stem}")

    def count(self, text: str) -> int:
        data = text.encode("utf-8")
        if not data:
            return 0
        parts = [bytes([b]) for b in data]
        while len(parts) > 1:
            best_rank: int | None = None
            best_at = -1
            for i in range(len(parts) - 1):
                rank = self._ranks.get(parts[i] + parts[i + 1])
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_at = i
            if best_rank is None:
                break
            parts[best_at:best_at + 2] = [parts[best_at] + parts[best_at + 1]]
        return len(parts)


DEFAULT_COUNTER = ApproxTokenCounter()


def count_tokens(text: str, counter: TokenCounter | None = None) -> int:
    return (counter or DEFAULT_COUNTER).count(text)


def request_input_tokens(request: CompletionRequest, counter: TokenCounter) -> int:
    """Token count of the concatenated request messages (text only)."""
    return counter.count("".join(m.content for m in request.messages))


# --- transcripts ---------------------------------------------------------------------


def _attachment_fingerprint(ref: ImageRef) -> str:
    # Content hash keeps digests stable across output directories while still
    # catching artifact drift; fall back to the name when unreadable.
    try:
        return hashlib.sha256(Path(ref.path).read_bytes()).hexdigest()
    except OSError:
        return Path(ref.path).name


def prompt_digest(request: CompletionRequest) -> str:
    """Stable content hash of the full rendered prompt, in message order."""
    payload = [
        {
            "role": m.role,
            "content": m.content,
            "attachments": [_attachment_fingerprint(a) for a in m.attachments],
            "tool_call_id": m.tool_call_id,
            "tool_calls": [c.to_dict() for c in m.tool_calls],
        }
        for m in request.messages
    ]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TranscriptEntry:
    text: str
    tool_calls: tuple[ToolCall, ...] = ()
    digest: str | None = None
    usage: Usage | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "digest": self.digest,
            "text": self.text,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "usage": (
                {"input_tokens": self.usage.input_tokens,
                 "output_tokens": self.usage.output_tokens}
                if self.usage is not None else None
            ),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TranscriptEntry":
        usage = data.get("usage")
        return cls(
            text=data.get("text") or "",
            tool_calls=tuple(ToolCall.from_dict(c) for c in data.get("tool_calls") or ()),
            digest=data.get("digest"),
            usage=Usage(**usage) if usage else None,
        )


def read_transcript(path: str | Path) -> list[TranscriptEntry]:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(TranscriptEntry.from_dict(json.loads(line)))
    return entries


def write_transcript(path: str | Path, entries: Iterable[TranscriptEntry]) -> None:
    try:
        with Path(path).open("w", encoding="utf-8") as handle:
            for entry in entries:
                handle.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write transcript {path}: {exc}") from exc


# --- backends ----------------------------------------------------------------------


class Backend(Protocol):
    counter: TokenCounter

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_s: float = 0.5
    multiplier: float = 2.0


class ScriptedBackend:
    """Replays a recorded transcript, one entry per completion, in order.

    In ``strict-hash`` mode every stored prompt digest must match the live
    request digest, which catches prompt-assembly drift. Usage is computed
    from the active token counter so efficiency metrics replay offline.
    """

    def __init__(self, entries: Sequence[TranscriptEntry], strict: bool = False,
                 counter: TokenCounter | None = None, source: str = "<memory>"):
        self._entries = list(entries)
        self._cursor = 0
        self._lock = threading.Lock()
        self.strict = strict
        self.counter = counter or ApproxTokenCounter()
        self.source = source

    @classmethod
    def from_path(cls, path: str | Path, strict: bool = False,
                  counter: TokenCounter | None = None) -> "ScriptedBackend":
        return cls(read_transcript(path), strict=strict, counter=counter, source=str(path))

    @property
    def calls_made(self) -> int:
        return self._cursor

    @property
    def entries_remaining(self) -> int:
        return len(self._entries) - self._cursor

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            if self._cursor >= len(self._entries):
                raise TranscriptExhausted(
                    f"{self.source}: transcript exhausted after {self._cursor} completions"
                )
            index = self._cursor
            entry = self._entries[index]
            self._cursor += 1
        if self.strict:
            live = prompt_digest(request)
            if entry.digest != live:
                raise TranscriptDivergence(entry.digest or "<none>", live, index)
        return CompletionResponse(
            text=entry.text,
            tool_calls=entry.tool_calls,
            usage=Usage(
                input_tokens=request_input_tokens(request, self.counter),
                output_tokens=self.counter.count(entry.text),
            ),
        )


class HttpBackend:
    """Chat-completions HTTP client with retries and an in-flight cap.

    The credential is read from a named environment variable, never from
    flags or files.
    """

    def __init__(self, base_url: str, model: str,
                 credential_env: str = "FRAUD_DESK_API_KEY",
                 retry: RetryPolicy = RetryPolicy(),
                 counter: TokenCounter | None = None,
                 in_flight_cap: int = 4,
                 timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.credential_env = credential_env
        self.retry = retry
        self.counter = counter or ApproxTokenCounter()
        self.timeout_s = timeout_s
        self._gate = threading.Semaphore(in_flight_cap)

    def _credential(self) -> str:
        value = os.environ.get(self.credential_env, "")
        if not value:
            raise AuthMissing(f"environment variable {self.credential_env} is not set")
        return value

    def _encode_message(self, message: ChatMessage) -> dict[str, Any]:
        body: dict[str, Any] = {"role": message.role}
        if message.attachments:
            parts: list[dict[str, Any]] = [{"type": "text", "text": message.content}]
            for ref in message.attachments:
                data = base64.b64encode(Path(ref.path).read_bytes()).decode("ascii")
                parts.append({
                    "type": "image_url",
                    "image_url": {"url": f"data:{ref.media_type};base64,{data}"},
                })
            body["content"] = parts
        else:
            body["content"] = message.content
        if message.role == "tool":
            body["tool_call_id"] = message.tool_call_id
        if message.tool_calls:
            body["tool_calls"] = [
                {
                    "id": call.id,
                    "type": "function",
                    "function": {"name": call.name,
                                 "arguments": json.dumps(call.arguments)},
                }
                for call in message.tool_calls
            ]
        return body

    def _encode_request(self, request: CompletionRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [self._encode_message(m) for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        if request.tools:
            body["tools"] = [
                {"type": "function", "function": t.to_dict()} for t in request.tools
            ]
        return body

    def _decode_response(self, payload: dict[str, Any]) -> CompletionResponse:
        choice = payload["choices"][0]["message"]
        calls = []
        for raw in choice.get("tool_calls") or ():
            fn = raw.get("function") or {}
            try:
                arguments = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                arguments = {"_raw": fn.get("arguments")}
            calls.append(ToolCall(id=str(raw.get("id")), name=str(fn.get("name")),
                                  arguments=arguments))
        usage = payload.get("usage") or {}
        return CompletionResponse(
            text=choice.get("content") or "",
            tool_calls=tuple(calls),
            usage=Usage(
                input_tokens=int(usage.get("prompt_tokens") or 0),
                output_tokens=int(usage.get("completion_tokens") or 0),
            ),
        )

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        token = self._credential()
        body = self._encode_request(request)
        url = f"{self.base_url}/chat/completions"
        headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}
        delay = self.retry.backoff_s
        last_error = ""
        with self._gate:
            for attempt in range(1, self.retry.max_attempts + 1):
                try:
                    response = requests.post(url, json=body, headers=headers,
                                             timeout=self.timeout_s)
                except requests.RequestException as exc:
                    last_error = str(exc)
                else:
                    if response.status_code == 200:
                        return self._decode_response(response.json())
                    last_error = f"HTTP {response.status_code}: {response.text[:200]}"
                    if response.status_code not in (429, 500, 502, 503, 504):
                        raise BackendUnavailable(
                            f"{url}: {last_error}", attempts=attempt
                        )
                if attempt < self.retry.max_attempts:
                    logger.warning("backend attempt %d/%d failed: %s",
                                   attempt, self.retry.max_attempts, last_error)
                    time.sleep(delay)
                    delay *= self.retry.multiplier
        raise BackendUnavailable(
            f"{url}: retries exhausted ({last_error})", attempts=self.retry.max_attempts
        )


class RecordingBackend:
    """Wraps any backend and appends one transcript entry per completion."""

    def __init__(self, inner: Backend, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()
        try:
            self._handle = self.path.open("w", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot open transcript {path}: {exc}") from exc

    @property
    def counter(self) -> TokenCounter:
        return self.inner.counter

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        response = self.inner.complete(request)
        entry = TranscriptEntry(
            text=response.text,
            tool_calls=response.tool_calls,
            digest=prompt_digest(request),
            usage=response.usage,
        )
        try:
            with self._lock:
                self._handle.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
                self._handle.flush()
        except OSError as exc:
            raise IoFailure(f"cannot append to transcript {self.path}: {exc}") from exc
        return response

    def close(self) -> None:
        with self._lock:
            self._handle.close()

    def __enter__(self) -> "RecordingBackend":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def record_transcript(backend: Backend, path: str | Path) -> RecordingBackend:
    """Enable golden-file recording for a live session."""
    return RecordingBackend(backend, path)


# --- backend config ------------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    """Parsed ``--backend`` value: ``http:URL@model`` or ``scripted:PATH``."""

    kind: str
    base_url: str = ""
    model: str = ""
    credential_env: str = "FRAUD_DESK_API_KEY"
    retry: RetryPolicy = RetryPolicy()
    transcript_path: str = ""
    strictness: str = "loose"

    @classmethod
    def parse(cls, text: str, credential_env: str = "FRAUD_DESK_API_KEY",
              strictness: str = "loose") -> "BackendConfig":
        if text.startswith("http:"):
            rest = text[len("http:"):]
            if "@" not in rest:
                raise ValueError("http backend must look like http:URL@model")
            url, _, model = rest.rpartition("@")
            return cls(kind="http", base_url=url, model=model, credential_env=credential_env)
        if text.startswith("scripted:"):
            return cls(kind="scripted", transcript_path=text[len("scripted:"):],
                       strictness=strictness)
        raise ValueError(f"unknown backend spec {text!r}")

    def build(self, counter: TokenCounter | None = None) -> Backend:
        if self.kind == "http":
            return HttpBackend(self.base_url, self.model,
                               credential_env=self.credential_env,
                               retry=self.retry, counter=counter)
        return ScriptedBackend.from_path(self.transcript_path,
                                         strict=self.strictness == "strict-hash",
                                         counter=counter)
