"""Chat-completion and embedding access with a deterministic on-disk cache.

Three backends share one interface:

``http_api``
    A chat-completions style HTTP endpoint. Request body::

        {"model": ..., "temperature": ..., "messages": [{"role": "system", ...},
                                                        {"role": "user", ...}, ...]}

    The response must carry ``choices[0].message.content`` and may carry
    ``usage.prompt_tokens`` / ``usage.completion_tokens``. Embeddings go to
    ``embed_endpoint`` with ``{"model": ..., "input": text}`` and are read from
    ``data[0].embedding``.
``replay``
    Reads ``<fixture_dir>/<digest>.txt`` for each request. A cache directory
    written by any other backend is a valid fixture directory.
``deterministic_mock``
    Calls a local responder function; nothing leaves the process.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import requests

from .attack_kb import EmbeddingVector
from .errors import BackendError, EmptyText, FixtureMissing, GatewayError, RetriesExhausted

log = logging.getLogger(__name__)

BACKEND_KINDS = ("http_api", "replay", "deterministic_mock")
HASH_EMBEDDER_ID = "hash-bow-256"


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_message: str
    user_messages: tuple[str, ...]
    temperature: float = 0.0
    schema_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "user_messages", tuple(self.user_messages))
        if not self.user_messages:
            raise ValueError("user_messages must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    output_tokens: int = 0
    latency: float = 0.0
    cached: bool = False


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "deterministic_mock"
    endpoint: str | None = None
    api_key_env: str | None = None
    max_parallel: int = 4
    retry_limit: int = 3
    fixture_dir: str | None = None
    model_id: str = "gpt-4o-mini"
    embed_endpoint: str | None = None
    embed_model: str = "text-embedding-ada-002"
    embed_dims: int = 256
    timeout: float = 60.0
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}")
        if self.kind == "http_api" and not self.endpoint:
            raise ValueError("http_api backend requires an endpoint")
        if self.kind == "replay" and not self.fixture_dir:
            raise ValueError("replay backend requires fixture_dir")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be positive")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")

    @property
    def embedder_id(self) -> str:
        if self.embed_endpoint:
            return f"http:{self.embed_model}"
        return HASH_EMBEDDER_ID if self.embed_dims == 256 else f"hash-bow-{self.embed_dims}"


def fingerprint(request: ChatRequest) -> str:
    """Stable sha256 digest of the call-relevant request fields.

    ``schema_id`` is left out on purpose: it changes parsing, not the call.
    """
    blob = json.dumps(
        {
            "model": request.model_id,
            "system": request.system_message,
            "messages": list(request.user_messages),
            "temperature": repr(float(request.temperature)),
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- hashed bag-of-tokens embedder -----------------------------------------------

_TOKEN_RE = re.compile(r"[0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")


def hash_embed(text: str, dims: int = 256) -> EmbeddingVector:
    """Signed feature hashing of lowercase alphanumeric tokens, L2-normalised."""
    tokens = tokenize(text)
    if not tokens:
        raise EmptyText("text has no alphanumeric tokens")
    acc = [0.0] * dims
    for tok in tokens:
        h = _token_hash(tok)
        acc[h % dims] += 1.0 if (h >> 32) & 1 else -1.0
    norm = sum(x * x for x in acc) ** 0.5
    if norm == 0.0:
        # every token cancelled out; fall back to unsigned counts
        for tok in tokens:
            acc[_token_hash(tok) % dims] += 1.0
        norm = sum(x * x for x in acc) ** 0.5
    return EmbeddingVector(tuple(x / norm for x in acc))


# -- responders for the mock backend -------------------------------------------------

Responder = Callable[[ChatRequest], str]


class ScriptedResponder:
    """Canned responses per schema id.

    A list value is consumed in order and its last element repeats. A
    callable value receives the request. ``default`` covers unknown schemas.
    """

    def __init__(self, script: Mapping[str | None, object], default: Responder | str | None = None):
        self._script = dict(script)
        self._cursor: dict[str | None, int] = {}
        self._default = default
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    def __call__(self, request: ChatRequest) -> str:
        with self._lock:
            self.requests.append(request)
            entry = self._script.get(request.schema_id, self._default)
            if entry is None:
                raise GatewayError(f"no scripted response for schema {request.schema_id!r}")
            if callable(entry):
                return entry(request)
            if isinstance(entry, str):
                return entry
            seq = list(entry)
            i = self._cursor.get(request.schema_id, 0)
            self._cursor[request.schema_id] = i + 1
            return seq[min(i, len(seq) - 1)]


# -- gateway ------------------------------------------------------------------

def _estimate_tokens(text: str) -> int:
    return len(text.split())


class Gateway:
    """Shared access point for chat and embeddings.

    At most ``config.max_parallel`` backend calls are in flight at once;
    cache writes are exclusive per key.
    """

    def __init__(
        self,
        config: BackendConfig,
        cache_dir: str | Path | None = None,
        responder: Responder | None = None,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        if responder is None and config.kind == "deterministic_mock":
            from .mock import OfflineAnalyst

            responder = OfflineAnalyst()
        self.responder = responder
        self._session = session
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_parallel)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._count_guard = threading.Lock()
        self.backend_calls = 0
        self.http_attempts = 0
        self.cache_hits = 0

    @property
    def kind(self) -> str:
        return self.config.kind

    def request(self, system: str, messages: Sequence[str], schema_id: str | None = None) -> ChatRequest:
        return ChatRequest(self.config.model_id, system, tuple(messages), 0.0, schema_id)

    def complete(self, system: str, messages: Sequence[str], schema_id: str | None = None) -> str:
        return self.chat(self.request(system, messages, schema_id)).text

    # cache ------------------------------------------------------------------
    def _key_lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def _cache_get(self, key: str) -> str | None:
        if not self.cache_dir:
            return None
        path = self.cache_dir / f"{key}.txt"
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def _cache_put(self, key: str, text: str) -> None:
        if not self.cache_dir:
            return
        path = self.cache_dir / f"{key}.txt"
        with self._key_lock(key):
            tmp = path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_text(text, encoding="utf-8")
            os.replace(tmp, path)

    # chat -------------------------------------------------------------------
    def chat(self, request: ChatRequest) -> ChatResponse:
        key = fingerprint(request)
        cached = self._cache_get(key)
        prompt_tokens = sum(_estimate_tokens(m) for m in (request.system_message, *request.user_messages))
        if cached is not None:
            with self._count_guard:
                self.cache_hits += 1
            return ChatResponse(cached, prompt_tokens, _estimate_tokens(cached), 0.0, cached=True)
        start = time.monotonic()
        with self._slots:
            with self._count_guard:
                self.backend_calls += 1
            if self.kind == "replay":
                text = self._replay(key)
                usage = (prompt_tokens, _estimate_tokens(text))
            elif self.kind == "deterministic_mock":
                text = self.responder(request)
                usage = (prompt_tokens, _estimate_tokens(text))
            else:
                text, usage = self._http_chat(request)
        self._cache_put(key, text)
        return ChatResponse(text, usage[0], usage[1], time.monotonic() - start)

    def _replay(self, key: str) -> str:
        path = Path(self.config.fixture_dir) / f"{key}.txt"
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise FixtureMissing(key) from None

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            token = os.environ.get(self.config.api_key_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, url: str, body: dict) -> dict:
        session = self._session or requests
        last: Exception | None = None
        attempts = self.config.retry_limit + 1
        for attempt in range(attempts):
            with self._count_guard:
                self.http_attempts += 1
            try:
                resp = session.post(url, json=body, headers=self._headers(), timeout=self.config.timeout)
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = BackendError(resp.status_code, resp.text)
                elif resp.status_code >= 400:
                    raise BackendError(resp.status_code, resp.text)
                else:
                    try:
                        return resp.json()
                    except ValueError:
                        raise BackendError(resp.status_code, resp.text) from None
            log.warning("backend attempt %d/%d failed: %s", attempt + 1, attempts, last)
            if attempt + 1 < attempts:
                self._sleep(self.config.backoff_base * (2 ** attempt))
        raise RetriesExhausted(attempts, last)

    def _http_chat(self, request: ChatRequest) -> tuple[str, tuple[int, int]]:
        messages = [{"role": "system", "content": request.system_message}]
        messages += [{"role": "user", "content": m} for m in request.user_messages]
        data = self._post(
            self.config.endpoint,
            {"model": request.model_id, "temperature": request.temperature, "messages": messages},
        )
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendError(200, json.dumps(data)[:500]) from None
        usage = data.get("usage") or {}
        return text, (int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))

    # embeddings -------------------------------------------------------------
    def embed(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        if not self.config.embed_endpoint:
            return hash_embed(text, self.config.embed_dims)
        with self._slots:
            data = self._post(self.config.embed_endpoint, {"model": self.config.embed_model, "input": text})
        try:
            return EmbeddingVector(tuple(data["data"][0]["embedding"]))
        except (KeyError, IndexError, TypeError, ValueError):
            raise BackendError(200, json.dumps(data)[:500]) from None

    @property
    def embedder_id(self) -> str:
        return self.config.embedder_id


def chat_complete(request: ChatRequest, config: BackendConfig, **gateway_kw) -> ChatResponse:
    """One-shot helper around :meth:`Gateway.chat`."""
    return Gateway(config, **gateway_kw).chat(request)


def embed_text(text: str, config: BackendConfig) -> EmbeddingVector:
    return Gateway(config, responder=lambda r: "").embed(text)
