"""Client for completion-style inference endpoints.

Every model call in the pipeline goes through :func:`complete` or
:func:`complete_batch`. Failures come back as ``LlmResult(failed=True)`` so a
single bad record never aborts a long batch.

Endpoints are addressed by ``base_url``:

* ``http(s)://host/v1`` speaks the OpenAI-compatible ``/completions``
  (or ``/chat/completions`` when ``chat`` is set), ``/embeddings`` and
  ``/tokenize`` routes.
* ``mock://<name-or-fixture-path>`` resolves to a :class:`ScriptedMock`
  registered in-process or loaded from a JSON fixture file.
"""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Protocol, Sequence

import requests

logger = logging.getLogger(__name__)

BACKOFF_FACTOR = 2.0
BACKOFF_CAP_SECONDS = 60.0

# patched in tests
_sleep = time.sleep
_jitter = random.Random()


class GatewayError(Exception):
    """Non-retryable gateway failure surfaced to the caller (embeddings, tokenize)."""


class TransportError(Exception):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str = ""
    api_key_env: str | None = None
    timeout_seconds: float = 120.0
    max_retries: int = 3
    max_concurrency: int = 8
    chat: bool = False
    backoff_base_seconds: float = 1.0

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if not self.timeout_seconds > 0:
            raise ValueError("timeout_seconds must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base_seconds < 0:
            raise ValueError("backoff_base_seconds must be >= 0")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 0.9
    max_new_tokens: int = 1024

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    request_id: str
    params: SamplingParams = field(default_factory=SamplingParams)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class LlmResult:
    request_id: str
    completion: str | None
    attempts: int
    latency_ms: int
    failed: bool = False
    failure_reason: str | None = None


class Transport(Protocol):
    def complete(self, prompt: str, params: SamplingParams, endpoint: EndpointConfig) -> str: ...

    def embed(self, texts: Sequence[str], endpoint: EndpointConfig) -> list[list[float]]: ...

    def tokenize(self, text: str, endpoint: EndpointConfig) -> int: ...


# --------------------------------------------------------------------------- #
# HTTP transport
# --------------------------------------------------------------------------- #


class HttpTransport:
    def __init__(self):
        self._local = threading.local()

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    def _post(self, endpoint: EndpointConfig, route: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        url = endpoint.base_url.rstrip("/") + route
        try:
            resp = self._session().post(url, json=payload, headers=headers, timeout=endpoint.timeout_seconds)
        except requests.RequestException as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", retryable=False)
        try:
            body = resp.json()
        except ValueError as exc:
            raise TransportError("response body is not JSON") from exc
        if not isinstance(body, dict):
            raise TransportError("response body is not a JSON object")
        return body

    def complete(self, prompt: str, params: SamplingParams, endpoint: EndpointConfig) -> str:
        payload = {
            "model": endpoint.model_name,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_new_tokens,
        }
        try:
            if endpoint.chat:
                payload["messages"] = [{"role": "user", "content": prompt}]
                body = self._post(endpoint, "/chat/completions", payload)
                text = body["choices"][0]["message"]["content"]
            else:
                payload["prompt"] = prompt
                body = self._post(endpoint, "/completions", payload)
                text = body["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion body: missing {exc}") from exc
        if not isinstance(text, str):
            raise TransportError("malformed completion body: text is not a string")
        return text

    def embed(self, texts: Sequence[str], endpoint: EndpointConfig) -> list[list[float]]:
        body = self._post(endpoint, "/embeddings", {"model": endpoint.model_name, "input": list(texts)})
        try:
            data = sorted(body["data"], key=lambda d: d["index"])
            return [list(map(float, d["embedding"])) for d in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed embeddings body: {exc}") from exc

    def tokenize(self, text: str, endpoint: EndpointConfig) -> int:
        body = self._post(endpoint, "/tokenize", {"model": endpoint.model_name, "prompt": text})
        if isinstance(body.get("count"), int):
            return body["count"]
        if isinstance(body.get("tokens"), list):
            return len(body["tokens"])
        raise TransportError("malformed tokenize body: no 'count' or 'tokens'")


_http = HttpTransport()
_mocks: dict[str, Transport] = {}
_mocks_lock = threading.Lock()


def register_mock(name: str, transport: Transport) -> None:
    """Bind ``mock://<name>`` to an in-process transport."""
    with _mocks_lock:
        _mocks[name] = transport


def unregister_mock(name: str) -> None:
    with _mocks_lock:
        _mocks.pop(name, None)


def resolve_transport(endpoint: EndpointConfig) -> Transport:
    url = endpoint.base_url
    if url.startswith("mock://"):
        name = url[len("mock://"):]
        with _mocks_lock:
            if name not in _mocks:
                from backforth.mock import ScriptedMock

                _mocks[name] = ScriptedMock.from_file(name)
            return _mocks[name]
    if url.startswith(("http://", "https://")):
        return _http
    raise ValueError(f"unsupported endpoint URL {url!r}")


# --------------------------------------------------------------------------- #
# concurrency limiting
# --------------------------------------------------------------------------- #

_limiters: dict[tuple[str, str, int], threading.BoundedSemaphore] = {}
_limiters_lock = threading.Lock()


def _limiter(endpoint: EndpointConfig) -> threading.BoundedSemaphore:
    key = (endpoint.base_url, endpoint.model_name, endpoint.max_concurrency)
    with _limiters_lock:
        sem = _limiters.get(key)
        if sem is None:
            sem = _limiters[key] = threading.BoundedSemaphore(endpoint.max_concurrency)
        return sem


def backoff_delay(attempt: int, base: float) -> float:
    """Full-jitter exponential delay before retry number ``attempt`` (1-based)."""
    ceiling = min(BACKOFF_CAP_SECONDS, base * BACKOFF_FACTOR ** (attempt - 1))
    return _jitter.uniform(0.0, ceiling)


# --------------------------------------------------------------------------- #
# public API
# --------------------------------------------------------------------------- #


def complete(request: LlmRequest, endpoint: EndpointConfig) -> LlmResult:
    transport = resolve_transport(endpoint)
    limiter = _limiter(endpoint)
    start = time.monotonic()
    attempts = 0
    reason = None
    while attempts <= endpoint.max_retries:
        attempts += 1
        with limiter:
            try:
                text = transport.complete(request.prompt, request.params, endpoint)
            except TransportError as exc:
                reason = str(exc)
                retryable = exc.retryable
            else:
                return LlmResult(request.request_id, text, attempts, _elapsed_ms(start))
        logger.debug("request %s attempt %d failed: %s", request.request_id, attempts, reason)
        if not retryable:
            break
        if attempts <= endpoint.max_retries:
            _sleep(backoff_delay(attempts, endpoint.backoff_base_seconds))
    return LlmResult(request.request_id, None, attempts, _elapsed_ms(start), failed=True, failure_reason=reason)


def complete_batch(requests_: Sequence[LlmRequest], endpoint: EndpointConfig) -> list[LlmResult]:
    """Complete all requests, preserving input order in the result list."""
    if not requests_:
        return []
    ids = [r.request_id for r in requests_]
    if len(set(ids)) != len(ids):
        raise ValueError("request_ids must be unique within a batch")
    workers = min(endpoint.max_concurrency, len(requests_))
    if workers == 1:
        return [complete(r, endpoint) for r in requests_]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="gateway") as pool:
        return list(pool.map(lambda r: complete(r, endpoint), requests_))


def _with_retries(fn, endpoint: EndpointConfig, what: str):
    limiter = _limiter(endpoint)
    attempts = 0
    while True:
        attempts += 1
        with limiter:
            try:
                return fn()
            except TransportError as exc:
                if not exc.retryable or attempts > endpoint.max_retries:
                    raise GatewayError(f"{what} failed after {attempts} attempt(s): {exc}") from exc
        _sleep(backoff_delay(attempts, endpoint.backoff_base_seconds))


def embed(texts: Sequence[str], endpoint: EndpointConfig, batch_size: int = 64) -> list[list[float]]:
    transport = resolve_transport(endpoint)
    out: list[list[float]] = []
    for i in range(0, len(texts), batch_size):
        chunk = list(texts[i : i + batch_size])
        vecs = _with_retries(lambda: transport.embed(chunk, endpoint), endpoint, "embedding request")
        if len(vecs) != len(chunk):
            raise GatewayError(f"embedding endpoint returned {len(vecs)} vectors for {len(chunk)} texts")
        out.extend(vecs)
    return out


def count_tokens(text: str, endpoint: EndpointConfig) -> int:
    transport = resolve_transport(endpoint)
    return _with_retries(lambda: transport.tokenize(text, endpoint), endpoint, "tokenize request")


def _elapsed_ms(start: float) -> int:
    return int((time.monotonic() - start) * 1000)
