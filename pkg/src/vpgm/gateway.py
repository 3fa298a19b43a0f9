"""Chat-completion providers: an HTTP client speaking the OpenAI-style
JSON shape, and a scripted mock used for tests and offline runs."""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx

from .errors import ExhaustedRetries, ProviderError

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "LLM_API_KEY"
BACKOFF_INITIAL = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_CAP = 30.0


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "meta-llama/Meta-Llama-3-8B-Instruct"
    temperature: float = 0.7
    max_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4
    api_key_env: str = DEFAULT_API_KEY_ENV

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be at least 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    seed: int | None = None
    # scenario key, used by the mock and for logging
    question_id: str | None = None
    sample_index: int = 0
    temperature: float | None = None


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    attempts: int = 1
    model: str = ""


class Provider:
    """Base provider. Subclasses implement ``_complete_once``."""

    def __init__(self, config: ProviderConfig | None = None):
        self.config = config or ProviderConfig()
        self._limiter = threading.BoundedSemaphore(self.config.max_parallel)

    def _complete_once(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._limiter:
            return self._complete_once(request)

    def complete_batch(self, requests: Sequence[CompletionRequest]) -> list:
        """Run requests with at most ``max_parallel`` in flight.

        Item ``i`` of the result is the response to request ``i``, or the
        ``ProviderError`` it failed with.
        """
        if not requests:
            raise ValueError("complete_batch needs at least one request")

        def one(req):
            try:
                return self.complete(req)
            except ProviderError as exc:
                return exc

        if len(requests) == 1:
            return [one(requests[0])]
        with ThreadPoolExecutor(max_workers=min(self.config.max_parallel, len(requests))) as pool:
            return list(pool.map(one, requests))


class MockProvider(Provider):
    """Scripted replies keyed by ``"<question_id>/<sample_index>"``."""

    def __init__(self, script: dict[str, str], config: ProviderConfig | None = None):
        super().__init__(config)
        if not isinstance(script, dict) or not all(isinstance(v, str) for v in script.values()):
            raise ValueError("mock script must map keys to reply strings")
        self.script = dict(script)
        self.calls: list[CompletionRequest] = []
        self._calls_lock = threading.Lock()

    @classmethod
    def from_file(cls, path, config: ProviderConfig | None = None) -> "MockProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), config)

    def _complete_once(self, request):
        with self._calls_lock:
            self.calls.append(request)
        key = f"{request.question_id}/{request.sample_index}"
        text = self.script.get(key, self.script.get("default"))
        if text is None:
            raise ProviderError(f"mock script has no reply for {key}", retryable=False)
        return CompletionResponse(
            text=text,
            prompt_tokens=len(request.prompt.split()),
            completion_tokens=len(text.split()),
            latency=0.0,
            model="mock",
        )


class HttpProvider(Provider):
    """POSTs to ``{endpoint}/chat/completions`` and reads
    ``choices[0].message.content``. Retries 429, 5xx and timeouts with
    capped, fully jittered exponential backoff."""

    def __init__(self, config: ProviderConfig | None = None, *,
                 sleep: Callable[[float], None] = time.sleep,
                 rng: random.Random | None = None,
                 transport: httpx.BaseTransport | None = None):
        super().__init__(config)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._client = httpx.Client(timeout=self.config.timeout, transport=transport)

    def close(self):
        self._client.close()

    def backoff_delay(self, retry: int) -> float:
        ceiling = min(BACKOFF_CAP, BACKOFF_INITIAL * BACKOFF_FACTOR ** retry)
        return self._rng.uniform(0.0, ceiling)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, request: CompletionRequest) -> dict:
        temp = self.config.temperature if request.temperature is None else request.temperature
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": temp,
            "max_tokens": self.config.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def _attempt(self, request: CompletionRequest) -> CompletionResponse:
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        t0 = time.perf_counter()
        try:
            resp = self._client.post(url, json=self._payload(request), headers=self._headers())
        except httpx.TimeoutException as exc:
            raise ProviderError(f"timeout: {exc}", retryable=True) from exc
        except httpx.TransportError as exc:
            raise ProviderError(f"transport error: {exc}", retryable=True) from exc
        latency = time.perf_counter() - t0
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderError(f"HTTP {resp.status_code}", retryable=True, status=resp.status_code)
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}", retryable=False,
                                status=resp.status_code)
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion body: {exc}", retryable=False,
                                status=resp.status_code) from None
        if not text:
            raise ProviderError("empty completion text", retryable=False, status=resp.status_code)
        usage = body.get("usage") or {}
        return CompletionResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency=latency,
            model=body.get("model", self.config.model),
        )

    def _complete_once(self, request):
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = self.backoff_delay(attempt - 1)
                log.info("retry %d/%d for %s/%s after %.2fs (%s)", attempt, self.config.max_retries,
                         request.question_id, request.sample_index, delay, last)
                self._sleep(delay)
            try:
                resp = self._attempt(request)
            except ProviderError as exc:
                if not exc.retryable:
                    raise
                last = exc
                continue
            return CompletionResponse(resp.text, resp.prompt_tokens, resp.completion_tokens,
                                      resp.latency, attempt + 1, resp.model)
        raise ExhaustedRetries(f"gave up after {self.config.max_retries + 1} attempts: {last}",
                               attempts=self.config.max_retries + 1, last_error=last)


def complete(provider: Provider, request: CompletionRequest) -> CompletionResponse:
    return provider.complete(request)


def complete_batch(provider: Provider, requests: Sequence[CompletionRequest]) -> list:
    return provider.complete_batch(requests)
