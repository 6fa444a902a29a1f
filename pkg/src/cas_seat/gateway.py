"""Uniform client for chat-completions-style multimodal endpoints.

One wire shape: POST {endpoint_url}/chat/completions with an OpenAI-style
JSON body, bearer token taken from the CAS_SEAT_API_KEY environment
variable, images inlined as base64 data URLs.

Every request is identified by a fingerprint: the SHA-256 digest of
(model_id, messages with image parts replaced by their bytes' digest,
temperature, max_output_tokens). The fingerprint is the cache key, the
mock-script key, and the unit of "one endpoint call" for resume
accounting. Cache entries live at {cache_dir}/{key[:2]}/{key}.txt and
hold the raw response text, written atomically.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence, Union

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "CAS_SEAT_API_KEY"
UNSCRIPTED_DEFAULT = "UNSCRIPTED"

# Sentinel entries understood by mock scripts (JSON and Python forms).
MOCK_RETRYABLE = "!retryable"
MOCK_TERMINAL = "!terminal"


class GatewayError(RuntimeError):
    """Terminal transport failure: retries exhausted, non-2xx status, bad image."""


class RetryableBackendError(GatewayError):
    """Transient failure; the client retries with exponential backoff."""


@dataclass
class ClientConfig:
    endpoint_url: str
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    request_timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 4
    cache_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)


@dataclass
class ChatExchange:
    request_messages: list
    response_text: str
    input_tokens: int
    output_tokens: int
    latency: float
    cache_hit: bool
    retries: int = 0


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(ref: str) -> dict:
    return {"type": "image", "ref": ref}


def user_message(*parts: dict) -> dict:
    return {"role": "user", "content": list(parts)}


def estimate_tokens(text: str) -> int:
    # Whitespace tokens; exactness to any model tokenizer is not promised.
    return len(text.split())


def _resolve_image(ref: str, image_root: Path | None) -> Path:
    path = Path(ref)
    if not path.is_absolute() and image_root is not None:
        path = Path(image_root) / path
    return path


def fingerprint_request(
    config: ClientConfig,
    messages: Sequence[Mapping],
    params: Mapping | None = None,
    image_root: Path | None = None,
) -> str:
    """Digest of everything the model sees; unrelated config fields never matter."""
    params = dict(params or {})
    canonical_messages = []
    for message in messages:
        parts = []
        for part in message["content"]:
            if part["type"] == "image":
                path = _resolve_image(part["ref"], image_root)
                try:
                    digest = hashlib.sha256(path.read_bytes()).hexdigest()
                except OSError as exc:
                    raise GatewayError(f"image unreadable: {path}: {exc}") from None
                parts.append({"type": "image", "sha256": digest})
            else:
                parts.append({"type": "text", "text": part["text"]})
        canonical_messages.append({"role": message["role"], "content": parts})
    payload = {
        "model_id": config.model_id,
        "messages": canonical_messages,
        "temperature": params.get("temperature", config.temperature),
        "max_output_tokens": params.get("max_output_tokens", config.max_output_tokens),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def complete(self, fingerprint: str, body: dict) -> str: ...


class HttpBackend:
    """OpenAI-compatible chat-completions transport."""

    def __init__(self, endpoint_url: str, timeout: float) -> None:
        self.endpoint_url = endpoint_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def complete(self, fingerprint: str, body: dict) -> str:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            resp = self._session.post(
                f"{self.endpoint_url}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise RetryableBackendError(f"endpoint unreachable: {exc}") from None
        if resp.status_code in (429, 500, 502, 503, 504):
            raise RetryableBackendError(f"retryable status {resp.status_code}")
        if resp.status_code != 200:
            raise GatewayError(
                f"terminal status {resp.status_code}: {resp.text[:500]}"
            )
        data = resp.json()
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise GatewayError(f"malformed completion payload: {data}") from None


ScriptEntry = Union[str, Sequence[str]]


class MockBackend:
    """Deterministic scripted backend keyed by request fingerprint.

    Script values are either a single response text or a list consumed one
    entry per call (the last entry repeats once exhausted). The sentinel
    entries "!retryable" and "!terminal" raise the corresponding failure.
    Unscripted fingerprints yield ``default`` so pipelines can run on
    partial scripts. Instruments call counts, per-fingerprint attempts, and
    the maximum number of simultaneously in-flight calls.
    """

    def __init__(
        self,
        script: Mapping[str, ScriptEntry] | None = None,
        default: str = UNSCRIPTED_DEFAULT,
        latency: float = 0.0,
        call_log: Path | None = None,
    ) -> None:
        self.script = dict(script or {})
        self.default = default
        self.latency = latency
        self.call_log = Path(call_log) if call_log else None
        self.calls: dict[str, int] = {}
        self.total_calls = 0
        self.max_in_flight_seen = 0
        self._in_flight = 0
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    def _next_entry(self, fingerprint: str) -> str:
        entry = self.script.get(fingerprint)
        if entry is None:
            return self.default
        if isinstance(entry, str):
            return entry
        idx = self._cursor.get(fingerprint, 0)
        self._cursor[fingerprint] = idx + 1
        return entry[min(idx, len(entry) - 1)]

    def _log(self, fingerprint: str, outcome: str) -> None:
        if self.call_log is None:
            return
        self.call_log.parent.mkdir(parents=True, exist_ok=True)
        with self.call_log.open("a", encoding="utf-8") as fh:
            fh.write(f"{fingerprint} {outcome}\n")

    def complete(self, fingerprint: str, body: dict) -> str:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self._in_flight)
            self.calls[fingerprint] = self.calls.get(fingerprint, 0) + 1
            self.total_calls += 1
            entry = self._next_entry(fingerprint)
        try:
            if self.latency:
                time.sleep(self.latency)
            if entry == MOCK_RETRYABLE:
                with self._lock:
                    self._log(fingerprint, "retryable")
                raise RetryableBackendError("scripted retryable failure")
            if entry == MOCK_TERMINAL:
                with self._lock:
                    self._log(fingerprint, "terminal")
                raise GatewayError("scripted terminal failure")
            with self._lock:
                self._log(fingerprint, "ok")
            return entry
        finally:
            with self._lock:
                self._in_flight -= 1

    @classmethod
    def from_script_file(cls, path: Union[str, Path]) -> "MockBackend":
        """Load a JSON mock script: {"default": str?, "call_log": path?,
        "responses": {fingerprint: text | [entries]}}."""
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            script=obj.get("responses") or {},
            default=obj.get("default", UNSCRIPTED_DEFAULT),
            latency=float(obj.get("latency", 0.0)),
            call_log=Path(obj["call_log"]) if obj.get("call_log") else None,
        )


@dataclass
class ThroughputCounters:
    input_tokens_per_s: float
    output_tokens_per_s: float
    request_count: int


class ModelClient:
    """Shareable client enforcing retries, caching, and the in-flight bound."""

    def __init__(
        self,
        config: ClientConfig,
        backend: Backend | None = None,
        image_root: Path | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.backend = backend or HttpBackend(config.endpoint_url, config.request_timeout)
        self.image_root = Path(image_root) if image_root else None
        self._clock = clock
        self._sleep = sleep
        self._semaphore = threading.Semaphore(config.max_in_flight)
        self._stats_lock = threading.Lock()
        self._first_request_at: float | None = None
        self._total_input_tokens = 0
        self._total_output_tokens = 0
        self._request_count = 0

    # -- cache ---------------------------------------------------------

    def _cache_path(self, key: str) -> Path | None:
        if self.config.cache_dir is None:
            return None
        return self.config.cache_dir / key[:2] / f"{key}.txt"

    def _cache_read(self, key: str) -> str | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        try:
            return path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            logger.warning("cache entry %s unreadable, treating as miss: %s", key, exc)
            return None

    def _cache_write(self, key: str, text: str) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)

    # -- request building ----------------------------------------------

    def _wire_body(self, messages: Sequence[Mapping], params: Mapping) -> dict:
        wire_messages = []
        for message in messages:
            parts = []
            for part in message["content"]:
                if part["type"] == "image":
                    path = _resolve_image(part["ref"], self.image_root)
                    try:
                        data = base64.b64encode(path.read_bytes()).decode("ascii")
                    except OSError as exc:
                        raise GatewayError(
                            f"image unreadable: {path}: {exc}"
                        ) from None
                    parts.append(
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{data}"},
                        }
                    )
                else:
                    parts.append({"type": "text", "text": part["text"]})
            wire_messages.append({"role": message["role"], "content": parts})
        return {
            "model": self.config.model_id,
            "messages": wire_messages,
            "temperature": params["temperature"],
            "max_tokens": params["max_output_tokens"],
        }

    def _count_input_tokens(self, messages: Sequence[Mapping]) -> int:
        total = 0
        for message in messages:
            for part in message["content"]:
                if part["type"] == "text":
                    total += estimate_tokens(part["text"])
        return total

    def _mark_request_start(self) -> None:
        with self._stats_lock:
            if self._first_request_at is None:
                self._first_request_at = self._clock()

    def _record(self, input_tokens: int, output_tokens: int) -> None:
        with self._stats_lock:
            self._total_input_tokens += input_tokens
            self._total_output_tokens += output_tokens
            self._request_count += 1

    # -- public API ------------------------------------------------------

    def fingerprint(
        self, messages: Sequence[Mapping], params: Mapping | None = None
    ) -> str:
        return fingerprint_request(self.config, messages, params, self.image_root)

    def chat(
        self, messages: Sequence[Mapping], params: Mapping | None = None
    ) -> ChatExchange:
        """Send one chat request; serve identical requests from cache when enabled."""
        if not messages:
            raise ValueError("messages must be non-empty")
        effective = {
            "temperature": (params or {}).get("temperature", self.config.temperature),
            "max_output_tokens": (params or {}).get(
                "max_output_tokens", self.config.max_output_tokens
            ),
        }
        key = fingerprint_request(self.config, messages, effective, self.image_root)
        input_tokens = self._count_input_tokens(messages)

        self._mark_request_start()
        started = self._clock()
        cached = self._cache_read(key)
        if cached is not None:
            output_tokens = estimate_tokens(cached)
            self._record(input_tokens, output_tokens)
            return ChatExchange(
                request_messages=list(messages),
                response_text=cached,
                input_tokens=input_tokens,
                output_tokens=output_tokens,
                latency=self._clock() - started,
                cache_hit=True,
            )

        body = self._wire_body(messages, effective)
        attempts = 1 + self.config.max_retries
        last_error: Exception | None = None
        for attempt in range(attempts):
            with self._semaphore:
                try:
                    text = self.backend.complete(key, body)
                except RetryableBackendError as exc:
                    last_error = exc
                    text = None
                # GatewayError and anything else propagates: terminal.
            if text is not None:
                self._cache_write(key, text)
                output_tokens = estimate_tokens(text)
                self._record(input_tokens, output_tokens)
                return ChatExchange(
                    request_messages=list(messages),
                    response_text=text,
                    input_tokens=input_tokens,
                    output_tokens=output_tokens,
                    latency=self._clock() - started,
                    cache_hit=False,
                    retries=attempt,
                )
            if attempt < attempts - 1:
                self._sleep(self.config.backoff_base * (2**attempt))
        raise GatewayError(
            f"endpoint failed after {self.config.max_retries} retries: {last_error}"
        )


def throughput_counters(client: ModelClient) -> ThroughputCounters:
    """Token rates over wall time since the client's first request."""
    with client._stats_lock:
        if client._request_count == 0:
            raise GatewayError("no exchanges completed yet")
        elapsed = max(client._clock() - client._first_request_at, 1e-9)
        return ThroughputCounters(
            input_tokens_per_s=client._total_input_tokens / elapsed,
            output_tokens_per_s=client._total_output_tokens / elapsed,
            request_count=client._request_count,
        )
