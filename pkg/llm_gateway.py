#!/usr/bin/env python3
"""
OpenMic LLM Gateway
===================
Provider-agnostic chat-completion and embedding client for OpenAI-compatible
servers, with retries and a scripted mock backend for offline runs.

Wire protocol:
    POST {base_url}/v1/chat/completions   {"model", "messages", "temperature", "max_tokens"}
    POST {base_url}/v1/embeddings         {"model", "input": [text, ...]}
    Authorization: Bearer $OPENMIC_API_KEY (per-endpoint override)

Retry policy:
    HTTP 429/5xx, timeouts and connection errors are retried with exponential
    backoff: 0.5 s, 1 s, 2 s, at most 4 attempts. Anything else fails at once.

Example usage:
    with HttpBackend() as backend:
        gateway = Gateway(backend)
        reply = gateway.chat(endpoint, ChatRequest(model="qwen", messages=[...]))
"""

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import httpx
import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from config import EndpointConfig, RetrySettings
from errors import DimensionMismatch, GatewayError, ProtocolError, TranscriptExhausted, TransientError


logger = structlog.get_logger(__name__)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}
MOCK_EMBEDDING_DIM = 256
DEFAULT_ROLE = "default"
EMBED_ROLE = "Embedder"


# ============================================================================
# WIRE TYPES
# ============================================================================

class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)
    role: Literal["system", "user", "assistant"]
    content: str


class ChatRequest(BaseModel):
    model: str
    messages: List[ChatMessage] = Field(min_length=1)
    temperature: float = Field(default=0.2, ge=0.0, le=2.0)
    max_tokens: int = Field(default=4096, gt=0)
    response_schema_id: Optional[str] = None
    role_tag: Optional[str] = None   # routing key for the mock; never sent on the wire

    @model_validator(mode="after")
    def _system_first(self):
        if any(m.role == "system" for m in self.messages[1:]):
            raise ValueError("a system message may only appear first")
        return self


class Usage(BaseModel):
    prompt_tokens: int = 0
    completion_tokens: int = 0


class ChatResponse(BaseModel):
    content: str
    finish_reason: str = "stop"
    usage: Usage = Field(default_factory=Usage)

    @model_validator(mode="after")
    def _content_on_stop(self):
        if self.finish_reason == "stop" and not self.content:
            raise ValueError("empty content with finish_reason=stop")
        return self


class EmbeddingVector(BaseModel):
    model_config = ConfigDict(frozen=True)
    values: List[float]

    @field_validator("values")
    @classmethod
    def _finite(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("embedding must have at least one dimension")
        if not all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
        return v

    @property
    def dimension(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def to_wire_payload(request: ChatRequest) -> Dict[str, Any]:
    """Body for POST /v1/chat/completions."""
    payload: Dict[str, Any] = {
        "model": request.model,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    if request.response_schema_id:
        payload["response_format"] = {"type": "json_object"}
    return payload


def from_wire_payload(payload: Dict[str, Any], role_tag: Optional[str] = None) -> ChatRequest:
    return ChatRequest(
        model=payload["model"],
        messages=payload["messages"],
        temperature=payload["temperature"],
        max_tokens=payload["max_tokens"],
        response_schema_id="json_object" if "response_format" in payload else None,
        role_tag=role_tag,
    )


def parse_chat_response(body: Any) -> ChatResponse:
    """Pull the first choice out of an OpenAI-compatible response body."""
    try:
        choice = body["choices"][0]
        content = choice["message"].get("content") or ""
        usage = body.get("usage") or {}
        return ChatResponse(
            content=content,
            finish_reason=choice.get("finish_reason") or "stop",
            usage=Usage(prompt_tokens=usage.get("prompt_tokens", 0),
                        completion_tokens=usage.get("completion_tokens", 0)),
        )
    except (KeyError, IndexError, TypeError, AttributeError, ValueError) as e:
        raise ProtocolError(f"malformed chat response: {e!r}")


def parse_embedding_response(body: Any, expected: int) -> List[List[float]]:
    try:
        data = sorted(body["data"], key=lambda d: d.get("index", 0))
        vectors = [list(map(float, d["embedding"])) for d in data]
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"malformed embedding response: {e!r}")
    if len(vectors) != expected:
        raise ProtocolError(f"expected {expected} embeddings, got {len(vectors)}")
    return vectors


# ============================================================================
# BACKENDS
# ============================================================================

class HttpBackend:
    """
    OpenAI-compatible HTTP backend.

    One httpx.Client per base URL, opened lazily and closed on exit.
    """

    def __init__(self, transport: Optional[httpx.BaseTransport] = None):
        self.transport = transport
        self._clients: Dict[str, httpx.Client] = {}
        self._lock = threading.Lock()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def close(self):
        with self._lock:
            for client in self._clients.values():
                client.close()
            self._clients.clear()

    def _client(self, endpoint: EndpointConfig) -> httpx.Client:
        with self._lock:
            if endpoint.base_url not in self._clients:
                self._clients[endpoint.base_url] = httpx.Client(base_url=endpoint.base_url,
                                                                transport=self.transport)
            return self._clients[endpoint.base_url]

    def _headers(self, endpoint: EndpointConfig) -> Dict[str, str]:
        key = endpoint.api_key or os.getenv(endpoint.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, endpoint: EndpointConfig, path: str, payload: Dict[str, Any], timeout: float) -> Any:
        try:
            response = self._client(endpoint).post(path, json=payload, headers=self._headers(endpoint),
                                                   timeout=timeout)
        except httpx.TimeoutException as e:
            raise TransientError(f"timeout calling {path}: {e}")
        except httpx.TransportError as e:
            raise TransientError(f"transport error calling {path}: {e}")
        if response.status_code in RETRYABLE_STATUS:
            raise TransientError(f"HTTP {response.status_code} from {path}", status=response.status_code)
        if response.status_code >= 400:
            raise GatewayError(f"HTTP {response.status_code} from {path}: {response.text[:200]}",
                               status=response.status_code)
        try:
            return response.json()
        except ValueError as e:
            raise ProtocolError(f"non-JSON body from {path}: {e}")

    def chat(self, endpoint: EndpointConfig, request: ChatRequest, *, role: str, ordinal: int,
             attempt: int) -> ChatResponse:
        body = self._post(endpoint, "/v1/chat/completions", to_wire_payload(request), endpoint.chat_timeout_s)
        return parse_chat_response(body)

    def embed(self, endpoint: EndpointConfig, texts: Sequence[str], *, ordinal: int,
              attempt: int) -> List[List[float]]:
        payload = {"model": endpoint.embedding_model, "input": list(texts)}
        body = self._post(endpoint, "/v1/embeddings", payload, endpoint.embed_timeout_s)
        return parse_embedding_response(body, len(texts))


class HashEmbedder:
    """
    Deterministic feature-hash embedder for offline runs.

    Character 1..3-grams are hashed (keyed blake2b, seeded) into ``dimension``
    signed buckets and the result is L2-normalized.
    """

    def __init__(self, dimension: int = MOCK_EMBEDDING_DIM, seed: int = 0):
        self.dimension = dimension
        self.key = seed.to_bytes(8, "little", signed=True)

    def _bucket(self, gram: str) -> Tuple[int, float]:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self.key).digest()
        value = int.from_bytes(digest, "little")
        return value % self.dimension, 1.0 if (value >> 63) & 1 else -1.0

    def embed_one(self, text: str) -> List[float]:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for n in (1, 2, 3):
            for i in range(len(text) - n + 1):
                index, sign = self._bucket(text[i:i + n])
                vec[index] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec.tolist()

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        return [self.embed_one(t) for t in texts]


_FAULT_RE = re.compile(r"^\s*(\d{3}|timeout)\s*[x×*]\s*(\d+)\s*$")


@dataclass
class TranscriptEntry:
    role: str
    ordinal: int
    kind: Literal["chat", "embed", "fault"]
    body: Any = None


def parse_fault(body: Any) -> Tuple[Optional[int], int]:
    """Fault body -> (status or None for timeout, times)."""
    if isinstance(body, str):
        match = _FAULT_RE.match(body)
        if not match:
            raise ValueError(f"fault shorthand must look like '429x3', got {body!r}")
        status = None if match.group(1) == "timeout" else int(match.group(1))
        return status, int(match.group(2))
    if isinstance(body, dict):
        status = body.get("status")
        return (int(status) if status is not None else None), int(body.get("times", 1))
    raise ValueError(f"unsupported fault body: {body!r}")


@dataclass
class ScriptedTranscript:
    """
    Canned backend behavior keyed by (role, invocation ordinal).

    Ordinals are 1-based and counted per role, one per gateway invocation
    (retries of the same invocation share its ordinal).
    """
    entries: List[TranscriptEntry] = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ScriptedTranscript":
        entries = []
        for raw in doc.get("entries", []):
            kind = raw.get("kind", "chat")
            if kind not in ("chat", "embed", "fault"):
                raise ValueError(f"unknown transcript entry kind {kind!r}")
            entries.append(TranscriptEntry(role=raw.get("role", DEFAULT_ROLE), ordinal=int(raw["ordinal"]),
                                           kind=kind, body=raw.get("body")))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "ScriptedTranscript":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def add(self, role: str, ordinal: int, body: Any, kind: str = "chat") -> "ScriptedTranscript":
        self.entries.append(TranscriptEntry(role=role, ordinal=ordinal, kind=kind, body=body))
        return self

    def lookup(self, role: str, ordinal: int, kind: str) -> Optional[TranscriptEntry]:
        for entry in self.entries:
            if entry.role == role and entry.ordinal == ordinal and entry.kind == kind:
                return entry
        return None


class MockBackend:
    """Backend whose every answer comes from a ScriptedTranscript."""

    def __init__(self, transcript: ScriptedTranscript, embedder: Optional[HashEmbedder] = None):
        self.transcript = transcript
        self.embedder = embedder or HashEmbedder()
        self.requests: List[Tuple[str, int, ChatRequest]] = []
        self._lock = threading.Lock()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        pass

    def _maybe_fault(self, role: str, ordinal: int, attempt: int, has_answer: bool) -> None:
        fault = self.transcript.lookup(role, ordinal, "fault")
        if fault is None:
            return
        status, times = parse_fault(fault.body)
        if attempt <= times or not has_answer:
            if status is None:
                raise TransientError(f"scripted timeout for {role}#{ordinal}")
            raise TransientError(f"scripted HTTP {status} for {role}#{ordinal}", status=status)

    def chat(self, endpoint: EndpointConfig, request: ChatRequest, *, role: str, ordinal: int,
             attempt: int) -> ChatResponse:
        with self._lock:
            self.requests.append((role, ordinal, request))
        entry = self.transcript.lookup(role, ordinal, "chat")
        self._maybe_fault(role, ordinal, attempt, entry is not None)
        if entry is None:
            raise TranscriptExhausted(role, ordinal)
        body = entry.body
        if isinstance(body, dict) and body.get("echo"):
            users = [m.content for m in request.messages if m.role == "user"]
            content = users[-1] if users else ""
        elif isinstance(body, str):
            content = body
        else:
            content = json.dumps(body, ensure_ascii=False)
        prompt_chars = sum(len(m.content) for m in request.messages)
        return ChatResponse(content=content, finish_reason="stop",
                            usage=Usage(prompt_tokens=prompt_chars, completion_tokens=len(content)))

    def embed(self, endpoint: EndpointConfig, texts: Sequence[str], *, ordinal: int,
              attempt: int) -> List[List[float]]:
        entry = self.transcript.lookup(EMBED_ROLE, ordinal, "embed")
        self._maybe_fault(EMBED_ROLE, ordinal, attempt, True)
        if entry is not None:
            return [list(map(float, v)) for v in entry.body]
        return self.embedder.embed(texts)


def mock_backend(transcript: ScriptedTranscript, seed: int = 0) -> MockBackend:
    return MockBackend(transcript, HashEmbedder(seed=seed))


# ============================================================================
# GATEWAY
# ============================================================================

@dataclass(frozen=True)
class CallRecord:
    role: str
    ordinal: int
    kind: str
    attempts: int
    ok: bool

    @property
    def retries(self) -> int:
        return self.attempts - 1


class Gateway:
    """
    Retrying front door to a backend.

    Counts invocations per role (the mock's ordinals), records every call,
    and sleeps through an injectable function so tests can use a fake clock.
    """

    def __init__(self, backend, retry: Optional[RetrySettings] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.backend = backend
        self.retry = retry or RetrySettings()
        self.sleep = sleep
        self.calls: List[CallRecord] = []
        self._ordinals: Dict[str, int] = {}
        self._lock = threading.Lock()

    def reserve_ordinals(self, role: str, count: int) -> List[int]:
        """Claim the next ``count`` ordinals for ``role`` in submission order."""
        with self._lock:
            start = self._ordinals.get(role, 0)
            self._ordinals[role] = start + count
        return list(range(start + 1, start + count + 1))

    def _retrying(self) -> Retrying:
        return Retrying(
            stop=stop_after_attempt(self.retry.max_attempts),
            wait=wait_exponential(multiplier=self.retry.base_delay_s, exp_base=self.retry.factor),
            retry=retry_if_exception_type(TransientError),
            sleep=self.sleep,
            before_sleep=lambda state: logger.warning(
                "gateway_retry", attempt=state.attempt_number,
                delay_s=state.next_action.sleep if state.next_action else None,
                error=str(state.outcome.exception()),
            ),
        )

    def _call(self, role: str, ordinal: int, kind: str, fn: Callable[[int], Any]) -> Any:
        attempts = 0
        try:
            for attempt in self._retrying():
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    result = fn(attempts)
        except RetryError as e:
            last = e.last_attempt.exception()
            with self._lock:
                self.calls.append(CallRecord(role, ordinal, kind, attempts, False))
            logger.error("gateway_exhausted", role=role, ordinal=ordinal, attempts=attempts, error=str(last))
            raise GatewayError(f"{role}#{ordinal}: gave up after {attempts} attempts: {last}",
                               attempts=attempts, status=getattr(last, "status", None))
        except GatewayError as e:
            e.attempts = attempts
            with self._lock:
                self.calls.append(CallRecord(role, ordinal, kind, attempts, False))
            raise
        with self._lock:
            self.calls.append(CallRecord(role, ordinal, kind, attempts, True))
        return result

    def chat(self, endpoint: EndpointConfig, request: ChatRequest, *, ordinal: Optional[int] = None) -> ChatResponse:
        role = request.role_tag or DEFAULT_ROLE
        if ordinal is None:
            ordinal = self.reserve_ordinals(role, 1)[0]
        response = self._call(role, ordinal, "chat", lambda attempt: self.backend.chat(
            endpoint, request, role=role, ordinal=ordinal, attempt=attempt))
        logger.debug("gateway_chat", role=role, ordinal=ordinal, model=request.model,
                     temperature=request.temperature, completion_tokens=response.usage.completion_tokens)
        return response

    def embed(self, endpoint: EndpointConfig, texts: Sequence[str]) -> List[EmbeddingVector]:
        if not texts:
            return []
        ordinal = self.reserve_ordinals(EMBED_ROLE, 1)[0]
        raw = self._call(EMBED_ROLE, ordinal, "embed", lambda attempt: self.backend.embed(
            endpoint, texts, ordinal=ordinal, attempt=attempt))
        if len(raw) != len(texts):
            raise DimensionMismatch(f"asked for {len(texts)} embeddings, got {len(raw)}")
        dims = {len(v) for v in raw}
        if len(dims) != 1:
            raise DimensionMismatch(f"backend returned mixed dimensions {sorted(dims)}")
        return [EmbeddingVector(values=v) for v in raw]

    def embed_batched(self, endpoint: EndpointConfig, texts: Sequence[str], batch_size: int = 64,
                      parallelism: int = 4) -> List[EmbeddingVector]:
        """Embed in batches, up to ``parallelism`` in flight; order preserved."""
        batches = [list(texts[i:i + batch_size]) for i in range(0, len(texts), batch_size)]
        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            results = list(pool.map(lambda batch: self.embed(endpoint, batch), batches))
        vectors = [v for batch in results for v in batch]
        if len({v.dimension for v in vectors}) > 1:
            raise DimensionMismatch("batches disagree on embedding dimension")
        return vectors

    def attempts_for(self, role: str) -> List[int]:
        return [c.attempts for c in self.calls if c.role == role]


def open_gateway(config, transcript_path: Optional[str] = None, sleep: Callable[[float], None] = time.sleep) -> Gateway:
    """Gateway over the HTTP backend, or over the mock when a transcript is given."""
    if transcript_path:
        backend = mock_backend(ScriptedTranscript.load(Path(transcript_path)), seed=config.seed)
    else:
        backend = HttpBackend()
    return Gateway(backend, retry=config.retry, sleep=sleep)
