"""Provider-agnostic chat gateway with deterministic caching and retries.

Responses are cached on disk keyed by a 256-bit content hash of
(provider, model, prompt, sampling). Re-scoring an experiment never
re-queries a provider; with the scripted mock or the synthetic oracle
the whole pipeline runs offline and byte-identical across runs.

Credentials come from the environment only: EHRRAG_<PROVIDER>_KEY.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from .errors import AuthError, ContextLengthExceeded, ProviderError
from .tokenization import count_tokens

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_OUTPUT_TOKENS = 2048


@dataclass(frozen=True)
class ChatRequest:
    provider_id: str
    model_id: str
    prompt_text: str
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    @property
    def request_key(self) -> str:
        payload = json.dumps(
            {
                "provider": self.provider_id,
                "model": self.model_id,
                "prompt": self.prompt_text,
                "temperature": self.temperature,
                "max_output_tokens": self.max_output_tokens,
            },
            sort_keys=True, ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    input_tokens: int
    output_tokens: int
    latency_s: float
    cached: bool


class TransientProviderError(ProviderError):
    """Retryable failure (network, rate limit, 5xx)."""


class ChatProvider(Protocol):
    provider_id: str

    def complete_raw(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        """Return (text, (input_tokens, output_tokens) or None)."""
        ...


class MockChatProvider:
    """Scripted provider: request_key -> response text.

    The script is a dict or a JSON file with the same mapping. Unknown
    keys raise ProviderError unless a default response is configured.
    """

    provider_id = "mock"

    def __init__(self, script: dict[str, str] | str | Path,
                 default: str | None = None) -> None:
        if isinstance(script, (str, Path)):
            script = json.loads(Path(script).read_text(encoding="utf-8"))
        self.script = dict(script)
        self.default = default

    def complete_raw(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        key = request.request_key
        if key in self.script:
            return self.script[key], None
        if self.default is not None:
            return self.default, None
        raise ProviderError(f"mock provider has no script entry for {key}")


class CallableChatProvider:
    """Provider backed by a plain function; used to mount the synth oracle."""

    def __init__(self, provider_id: str, fn: Callable[[ChatRequest], str]) -> None:
        self.provider_id = provider_id
        self.fn = fn

    def complete_raw(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        return self.fn(request), None


class OpenAICompatProvider:
    """Adapter for OpenAI-compatible chat-completions endpoints."""

    def __init__(self, provider_id: str, endpoint: str, api_key_env: str | None = None,
                 timeout: float = 120.0) -> None:
        self.provider_id = provider_id
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env or f"EHRRAG_{provider_id.upper()}_KEY"
        self.timeout = timeout

    def complete_raw(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        import os

        import requests

        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise AuthError(f"no credentials in ${self.api_key_env}")
        body = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            resp = requests.post(f"{self.endpoint}/chat/completions", json=body,
                                 headers={"Authorization": f"Bearer {api_key}"},
                                 timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransientProviderError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"provider rejected credentials ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientProviderError(f"HTTP {resp.status_code}")
        if resp.status_code == 400 and "context" in resp.text.lower():
            raise ContextLengthExceeded(resp.text[:500])
        if resp.status_code != 200:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        payload = resp.json()
        text = payload["choices"][0]["message"]["content"]
        usage = payload.get("usage")
        if usage:
            return text, (int(usage.get("prompt_tokens", 0)),
                          int(usage.get("completion_tokens", 0)))
        return text, None


class ChatGateway:
    """Caching, retrying front door for all chat completions.

    Safe for concurrent use; cache writes are serialized. calls_made
    counts actual provider invocations (cache hits excluded).
    """

    def __init__(
        self,
        provider: ChatProvider,
        cache_dir: str | Path | None = None,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        model_windows: dict[str, int] | None = None,
    ) -> None:
        self.provider = provider
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.model_windows = dict(model_windows or {})
        self.calls_made = 0
        self._lock = threading.Lock()
        self._cache: dict[str, dict] = {}
        self._cache_path: Path | None = None
        if cache_dir is not None:
            cache_dir = Path(cache_dir)
            cache_dir.mkdir(parents=True, exist_ok=True)
            self._cache_path = cache_dir / "responses.jsonl"
            if self._cache_path.exists():
                for line in self._cache_path.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        entry = json.loads(line)
                        self._cache[entry["request_key"]] = entry

    def complete(self, request: ChatRequest) -> ChatResponse:
        window = self.model_windows.get(request.model_id)
        prompt_tokens = count_tokens(request.prompt_text)
        if window is not None and prompt_tokens > window:
            raise ContextLengthExceeded(
                f"prompt is {prompt_tokens} tokens, {request.model_id} window is {window}")

        key = request.request_key
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return ChatResponse(text=hit["text"],
                                input_tokens=hit["input_tokens"],
                                output_tokens=hit["output_tokens"],
                                latency_s=0.0, cached=True)

        started = time.monotonic()
        text, usage = self._call_with_retries(request)
        latency = time.monotonic() - started
        if usage is None:
            usage = (prompt_tokens, count_tokens(text))
        entry = {"request_key": key, "text": text,
                 "input_tokens": usage[0], "output_tokens": usage[1]}
        with self._lock:
            self._cache[key] = entry
            if self._cache_path is not None:
                with self._cache_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return ChatResponse(text=text, input_tokens=usage[0], output_tokens=usage[1],
                            latency_s=latency, cached=False)

    def _call_with_retries(self, request: ChatRequest) -> tuple[str, tuple[int, int] | None]:
        delay = self.backoff_s
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._lock:
                    self.calls_made += 1
                return self.provider.complete_raw(request)
            except TransientProviderError as exc:
                last = exc
                if attempt < self.max_retries:
                    logger.warning("transient provider failure (attempt %d): %s",
                                   attempt + 1, exc)
                    time.sleep(delay)
                    delay *= 2
        raise ProviderError(f"provider failed after {self.max_retries + 1} attempts: {last}")
