"""Embedding and chat-completion gateway.

Two provider kinds share one surface:

* ``remote`` speaks the common ``/embeddings`` and ``/chat/completions`` JSON
  interface at ``base_url`` with bearer auth.
* ``mock`` is pure and offline. Embeddings hash whitespace tokens into 16
  buckets; chat replies are produced by per-task handlers selected by the
  ``TASK: <NAME>`` first line of the prompt.
"""

from __future__ import annotations

import importlib
import logging
import math
import os
import random
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import TypeVar

import httpx

from .errors import AuthMissing, MockUnknownTask, PreconditionError, ProviderError
from .vecstore import fnv1a_64

log = logging.getLogger(__name__)

T = TypeVar("T")

MOCK_DIMENSION = 16
BACKOFF_BASE = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_CAP = 30.0
DEFAULT_API_KEY_ENV = "RAGKIT_API_KEY"


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "remote"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = DEFAULT_API_KEY_ENV
    embedding_model: str = "text-embedding-3-small"
    chat_model: str = "gpt-4o-mini"
    timeout: float = 60.0
    max_retries: int = 5
    retry: bool = True

    def __post_init__(self):
        if self.kind not in ("remote", "mock"):
            raise PreconditionError(f"provider kind must be 'remote' or 'mock', got {self.kind!r}")
        if not 0 <= self.max_retries <= 10:
            raise PreconditionError("max_retries must be in [0, 10]")
        if self.timeout <= 0:
            raise PreconditionError("timeout must be positive")


@dataclass(frozen=True)
class ChatRequest:
    user_prompt: str
    system_prompt: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 2000
    seed: int | None = None
    model: str | None = None

    def __post_init__(self):
        if not self.user_prompt:
            raise PreconditionError("user_prompt must be non-empty")
        if self.temperature < 0:
            raise PreconditionError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise PreconditionError("max_output_tokens must be positive")


@dataclass(frozen=True)
class EmbeddingBatch:
    texts: list[str]
    model: str = "text-embedding-3-small"
    max_chars: int = 8000
    batch_size: int = 128

    def __post_init__(self):
        if self.max_chars <= 0 or self.batch_size <= 0:
            raise PreconditionError("max_chars and batch_size must be positive")


class Embeddings(list):
    """List of vectors; ``truncated`` holds indices of inputs cut to max_chars."""

    truncated: list[int]

    def __init__(self, vectors=(), truncated=()):
        super().__init__(vectors)
        self.truncated = list(truncated)


# retry -----------------------------------------------------------------

def backoff_cap(retry_index: int) -> float:
    """Upper bound of the jittered sleep before retry ``retry_index`` (0-based)."""
    return min(BACKOFF_CAP, BACKOFF_BASE * BACKOFF_FACTOR ** retry_index)


def call_with_retry(attempt: Callable[[], T], retry: bool = True, max_retries: int = 5,
                    sleep: Callable[[float], None] = time.sleep,
                    rand: Callable[[], float] = random.random) -> T:
    """Run ``attempt`` until it succeeds or retries are exhausted.

    Only ProviderErrors with status None (transport/timeout), 429 or 5xx are
    retried, with full-jitter exponential backoff. The error that escapes
    has ``attempts`` set to the number of calls made.
    """
    calls = 0
    while True:
        calls += 1
        try:
            return attempt()
        except ProviderError as exc:
            exc.attempts = calls
            retries_done = calls - 1
            if not (retry and exc.retryable and retries_done < max_retries):
                raise
            delay = rand() * backoff_cap(retries_done)
            log.debug("retryable provider failure (%s); sleeping %.3fs", exc, delay)
            sleep(delay)


# mock provider -----------------------------------------------------------

def mock_embedding(text: str) -> list[float]:
    vec = [0.0] * MOCK_DIMENSION
    for token in text.lower().split():
        vec[fnv1a_64(token.encode("utf-8")) % MOCK_DIMENSION] += 1.0
    norm = math.sqrt(math.fsum(x * x for x in vec))
    if norm == 0.0:
        return vec
    return [x / norm for x in vec]


_MOCK_TASKS: dict[str, Callable[[str], str]] = {}
# modules that register mock handlers; imported lazily to avoid cycles
_HANDLER_MODULES = ("ragkit.ragflow", "ragkit.ragas")


def register_mock_task(name: str):
    def deco(fn: Callable[[str], str]):
        _MOCK_TASKS[name] = fn
        return fn
    return deco


def task_tag(prompt: str) -> str | None:
    first = prompt.split("\n", 1)[0].strip()
    if first.startswith("TASK:"):
        return first[len("TASK:"):].strip()
    return None


def mock_chat(prompt: str) -> str:
    for mod in _HANDLER_MODULES:
        importlib.import_module(mod)
    tag = task_tag(prompt)
    handler = _MOCK_TASKS.get(tag) if tag else None
    if handler is None:
        raise MockUnknownTask(f"mock provider has no handler for task tag {tag!r}")
    return handler(prompt)


# gateway -----------------------------------------------------------------

@dataclass
class Gateway:
    """Provider client bound to one configuration.

    ``transport`` and ``sleep`` exist for tests (httpx.MockTransport and a
    fake clock).
    """

    config: ProviderConfig
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = field(default=time.sleep)

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise AuthMissing(f"environment variable {self.config.api_key_env} is not set")
        return key

    def _post(self, path: str, payload: dict) -> dict:
        key = self._api_key()
        url = self.config.base_url.rstrip("/") + path

        def attempt() -> dict:
            log.debug("POST %s model=%s", url, payload.get("model"))
            try:
                with httpx.Client(transport=self.transport, timeout=self.config.timeout) as client:
                    resp = client.post(url, json=payload, headers={"Authorization": f"Bearer {key}"})
            except httpx.TimeoutException as exc:
                raise ProviderError(f"timeout calling {url}: {exc}") from exc
            except httpx.TransportError as exc:
                raise ProviderError(f"transport error calling {url}: {exc}") from exc
            log.debug("POST %s -> %s", url, resp.status_code)
            if resp.status_code >= 400:
                raise ProviderError(f"{url} returned an error", status=resp.status_code, body=resp.text[:2000])
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"{url} returned non-JSON body", status=resp.status_code,
                                    body=resp.text[:2000]) from exc

        return call_with_retry(attempt, self.config.retry, self.config.max_retries, sleep=self.sleep)

    def embed_texts(self, batch: EmbeddingBatch) -> Embeddings:
        if not batch.texts:
            raise PreconditionError("embed_texts needs at least one text")
        texts, truncated = [], []
        for i, t in enumerate(batch.texts):
            if len(t) > batch.max_chars:
                truncated.append(i)
                t = t[:batch.max_chars]
            texts.append(t)
        if truncated:
            log.info("truncated %d text(s) to %d characters before embedding", len(truncated), batch.max_chars)

        if self.config.kind == "mock":
            return Embeddings([mock_embedding(t) for t in texts], truncated)

        vectors: list[list[float]] = []
        for lo in range(0, len(texts), batch.batch_size):
            chunk = texts[lo:lo + batch.batch_size]
            data = self._post("/embeddings", {"model": batch.model, "input": chunk})
            try:
                items = sorted(data["data"], key=lambda d: d.get("index", 0))
                got = [[float(x) for x in item["embedding"]] for item in items]
            except (KeyError, TypeError, ValueError) as exc:
                raise ProviderError(f"malformed embeddings response: {exc}") from exc
            if len(got) != len(chunk):
                raise ProviderError(f"expected {len(chunk)} embeddings, got {len(got)}")
            vectors.extend(got)
        if len({len(v) for v in vectors}) > 1:
            raise ProviderError("provider returned embeddings of differing dimension")
        return Embeddings(vectors, truncated)

    def chat_complete(self, req: ChatRequest) -> str:
        if self.config.kind == "mock":
            return mock_chat(req.user_prompt)
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": req.user_prompt})
        payload = {
            "model": req.model or self.config.chat_model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        data = self._post("/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {exc}") from exc


def embed_texts(cfg: ProviderConfig, batch: EmbeddingBatch) -> Embeddings:
    return Gateway(cfg).embed_texts(batch)


def chat_complete(cfg: ProviderConfig, req: ChatRequest) -> str:
    return Gateway(cfg).chat_complete(req)


def as_gateway(provider: ProviderConfig | Gateway) -> Gateway:
    return provider if isinstance(provider, Gateway) else Gateway(provider)


def embedder_for(gateway: Gateway, model: str, max_chars: int = 8000,
                 batch_size: int = 128) -> Callable[[Sequence[str]], list[list[float]]]:
    def embed(texts: Sequence[str]) -> list[list[float]]:
        return list(gateway.embed_texts(EmbeddingBatch(list(texts), model, max_chars, batch_size)))
    return embed
