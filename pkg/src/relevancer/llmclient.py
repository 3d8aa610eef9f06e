"""Completion backends (chat-completions HTTP or deterministic mocks) with an append-only cache.

Cache key: SHA-256 over the UTF-8 bytes of::

    json.dumps({"max_tokens": ..., "model": ..., "prompt": ..., "temperature": ..., "top_p": ...},
               sort_keys=True, separators=(",", ":"), ensure_ascii=False)

Records live in ``<cache_dir>/<model-slug>-<params-hash>.jsonl``, one JSON object per line.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol

import httpx

from relevancer.core import ConfigError, LabelScheme, RelevancerError, pair_key
from relevancer.rng import Xoshiro256, derive_seed

log = logging.getLogger(__name__)

API_KEY_ENV = "RELEVANCER_LLM_API_KEY"
MAX_ATTEMPTS = 4
RETRY_BASE_S = 1.0
JITTER = 0.25


class BackendUnavailable(RelevancerError):
    """Retries exhausted on 429, 5xx or transport errors."""


class BackendRejected(RelevancerError):
    """Non-retryable 4xx response."""


class TransientBackendError(RelevancerError):
    def __init__(self, message: str, status: Optional[int] = None):
        self.status = status
        super().__init__(message)


class CacheCorrupt(RelevancerError):
    pass


class UnknownPair(RelevancerError):
    pass


@dataclass(frozen=True)
class LlmConfig:
    model: str
    endpoint: str
    name: Optional[str] = None
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 256

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ConfigError("max_tokens must be positive")
        if not self.endpoint:
            raise ConfigError("endpoint is required")

    @property
    def label(self) -> str:
        """Name used in configuration ids."""
        return self.name or self.model

    def sampling(self) -> dict:
        return {"temperature": self.temperature, "top_p": self.top_p, "max_tokens": self.max_tokens}


def cache_key(prompt: str, config: LlmConfig) -> str:
    payload = {"model": config.model, "prompt": prompt, **config.sampling()}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CompletionRecord:
    cache_key: str
    prompt: str
    response: str
    model: str
    latency_ms: float
    token_counts: Optional[tuple[int, int]] = None
    retries: int = 0
    cached: bool = field(default=False, compare=False)
    # latency of the original backend call; equals latency_ms except on cache hits
    recorded_latency_ms: Optional[float] = field(default=None, compare=False)

    @property
    def backend_latency_ms(self) -> float:
        return self.latency_ms if self.recorded_latency_ms is None else self.recorded_latency_ms

    def to_json(self) -> dict:
        return {
            "cache_key": self.cache_key,
            "prompt": self.prompt,
            "response": self.response,
            "model": self.model,
            "latency_ms": self.latency_ms,
            "token_counts": list(self.token_counts) if self.token_counts else None,
            "retries": self.retries,
        }

    @classmethod
    def from_json(cls, row: Mapping) -> "CompletionRecord":
        tc = row.get("token_counts")
        return cls(row["cache_key"], row["prompt"], row["response"], row["model"],
                   float(row["latency_ms"]), tuple(tc) if tc else None, int(row.get("retries", 0)))


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_") or "model"


class Cache:
    """Append-only completion cache, one file per (model, sampling parameters)."""

    def __init__(self, directory: str | Path | None):
        self.directory = Path(directory) if directory is not None else None
        self._lock = threading.Lock()
        self._tables: dict[Path | str, dict[str, CompletionRecord]] = {}

    def path_for(self, config: LlmConfig) -> Path | None:
        if self.directory is None:
            return None
        params = json.dumps({"model": config.model, **config.sampling()}, sort_keys=True)
        digest = hashlib.sha256(params.encode()).hexdigest()[:12]
        return self.directory / f"{_slug(config.model)}-{digest}.jsonl"

    def _table(self, config: LlmConfig) -> dict[str, CompletionRecord]:
        path = self.path_for(config)
        slot = path if path is not None else f"mem:{config.model}:{config.sampling()}"
        table = self._tables.get(slot)
        if table is None:
            table = self._read(path) if path is not None else {}
            self._tables[slot] = table
        return table

    @staticmethod
    def _read(path: Path) -> dict[str, CompletionRecord]:
        table: dict[str, CompletionRecord] = {}
        if not path.exists():
            return table
        data = path.read_bytes()
        lines = data.split(b"\n")
        tail = lines.pop()  # text after the last newline: empty, or a torn write
        if tail.strip():
            log.warning("dropping incomplete trailing cache record in %s", path)
            with open(path, "r+b") as fh:
                fh.truncate(len(data) - len(tail))
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = CompletionRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CacheCorrupt(f"{path}:{lineno}: {exc}") from None
            table[rec.cache_key] = rec
        return table

    def get(self, key: str, config: LlmConfig, prompt: str | None = None) -> CompletionRecord | None:
        with self._lock:
            rec = self._table(config).get(key)
        if rec is not None and prompt is not None and rec.prompt != prompt:
            raise CacheCorrupt(f"cache key {key} maps to a different prompt")
        return rec

    def put(self, record: CompletionRecord, config: LlmConfig) -> None:
        with self._lock:
            table = self._table(config)
            if record.cache_key in table:
                return
            path = self.path_for(config)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
                    fh.flush()
            table[record.cache_key] = record


@dataclass(frozen=True)
class BackendReply:
    text: str
    latency_ms: Optional[float] = None
    token_counts: Optional[tuple[int, int]] = None


class Backend(Protocol):
    def send(self, prompt: str, config: LlmConfig) -> BackendReply: ...


class HttpBackend:
    """Chat-completions style endpoint: one user message carrying the whole prompt."""

    def __init__(self, client: httpx.Client | None = None, timeout: float = 120.0):
        self._client = client or httpx.Client(timeout=timeout)

    def send(self, prompt: str, config: LlmConfig) -> BackendReply:
        body = {
            "model": config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "top_p": config.top_p,
            "max_tokens": config.max_tokens,
        }
        headers = {}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(config.endpoint, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"backend returned {resp.status_code}", resp.status_code)
        if resp.status_code >= 400:
            raise BackendRejected(f"backend rejected request: {resp.status_code} {resp.text[:200]}")
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise BackendRejected("response has no choices[0].message.content") from None
        usage = payload.get("usage") or {}
        counts = None
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            counts = (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return BackendReply(text or "", token_counts=counts)


def extract_pair(prompt: str) -> tuple[str, str]:
    """Recover the question pair from the final line of an assembled prompt."""
    last = prompt.rstrip("\n").rsplit("\n", 1)[-1]
    if not last.startswith("query: ") or ", product title: " not in last:
        raise UnknownPair("prompt does not end with a query/product line")
    query, _, title = last[len("query: "):].partition(", product title: ")
    return query, title


class MockBackend:
    """Deterministic stand-in for a hosted model.

    ``oracle`` answers with the gold label, ``fixed`` always with one label, and ``noisy``
    answers gold with probability 1 - flip_rate, otherwise a uniformly drawn other label.
    The noisy draw is seeded per pair, so it does not depend on call order.
    """

    def __init__(self, mode: str, gold: Mapping[tuple[str, str], str] | None = None,
                 scheme: LabelScheme | None = None, label: str | None = None,
                 flip_rate: float = 0.0, seed: int = 0, latency_ms: float = 0.0):
        if mode not in ("oracle", "fixed", "noisy"):
            raise ConfigError(f"unknown mock mode {mode!r}")
        if mode == "fixed" and not label:
            raise ConfigError("fixed mock needs a label")
        if mode == "noisy":
            if scheme is None:
                raise ConfigError("noisy mock needs a scheme")
            if not 0.0 <= flip_rate <= 1.0:
                raise ConfigError("flip_rate must be in [0, 1]")
        self.mode = mode
        self.gold = {pair_key(*k): v for k, v in (gold or {}).items()}
        self.scheme = scheme
        self.label = label
        self.flip_rate = flip_rate
        self.seed = seed
        self.latency_ms = latency_ms
        self.calls = 0
        self._lock = threading.Lock()

    def answer(self, query: str, title: str) -> str:
        if self.mode == "fixed":
            return self.label
        key = pair_key(query, title)
        if key not in self.gold:
            raise UnknownPair(f"no gold label for pair {query!r} / {title!r}")
        gold = self.gold[key]
        if self.mode == "oracle":
            return gold
        rng = Xoshiro256(derive_seed(self.seed, *key))
        if rng.random() >= self.flip_rate:
            return gold
        others = [lab for lab in self.scheme.labels if lab != gold]
        return others[rng.randbelow(len(others))] if others else gold

    def send(self, prompt: str, config: LlmConfig) -> BackendReply:
        with self._lock:
            self.calls += 1
        label = self.label if self.mode == "fixed" else self.answer(*extract_pair(prompt))
        text = f"{{'rating': '{label}'}}"
        counts = (len(prompt.split()), len(text.split()))
        return BackendReply(text, latency_ms=self.latency_ms, token_counts=counts)


def mock_backend(mode: str, gold: Mapping[tuple[str, str], str] | None = None, **kwargs) -> MockBackend:
    return MockBackend(mode, gold, **kwargs)


def parse_mock_spec(endpoint: str) -> dict:
    """``mock:oracle`` | ``mock:fixed:<label>`` | ``mock:noisy:<flip_rate>[:<seed>]``."""
    parts = endpoint.split(":")
    if parts[0] != "mock" or len(parts) < 2:
        raise ConfigError(f"not a mock endpoint: {endpoint!r}")
    mode = parts[1]
    if mode == "oracle" and len(parts) == 2:
        return {"mode": "oracle"}
    if mode == "fixed" and len(parts) == 3:
        return {"mode": "fixed", "label": parts[2]}
    if mode == "noisy" and len(parts) in (3, 4):
        try:
            return {"mode": "noisy", "flip_rate": float(parts[2]),
                    "seed": int(parts[3]) if len(parts) == 4 else 0}
        except ValueError:
            pass
    raise ConfigError(f"bad mock endpoint {endpoint!r}")


def is_mock(endpoint: str) -> bool:
    return endpoint.startswith("mock:")


def make_backend(config: LlmConfig, scheme: LabelScheme | None = None,
                 gold: Mapping[tuple[str, str], str] | None = None) -> Backend:
    if is_mock(config.endpoint):
        spec = parse_mock_spec(config.endpoint)
        return MockBackend(gold=gold, scheme=scheme, **spec)
    if not config.endpoint.startswith(("http://", "https://")):
        raise ConfigError(f"unsupported endpoint {config.endpoint!r}")
    return HttpBackend()


def backoff_delay(attempt: int, base: float = RETRY_BASE_S, rand: Callable[[], float] = random.random) -> float:
    """Delay before retry number ``attempt`` (0-based): base * 2**attempt, +-25% jitter."""
    return base * (2 ** attempt) * (1.0 + JITTER * (2.0 * rand() - 1.0))


def complete(prompt: str, config: LlmConfig, cache: Cache, backend: Backend,
             sleep: Callable[[float], None] = time.sleep, retry_base: float = RETRY_BASE_S) -> CompletionRecord:
    """Serve from cache or call the backend with bounded retries, then persist the record."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    key = cache_key(prompt, config)
    hit = cache.get(key, config, prompt)
    if hit is not None:
        return CompletionRecord(hit.cache_key, hit.prompt, hit.response, hit.model, 0.0,
                                hit.token_counts, hit.retries, cached=True,
                                recorded_latency_ms=hit.latency_ms)
    retries = 0
    while True:
        start = time.perf_counter()
        try:
            reply = backend.send(prompt, config)
            break
        except TransientBackendError as exc:
            if retries + 1 >= MAX_ATTEMPTS:
                raise BackendUnavailable(f"gave up after {MAX_ATTEMPTS} attempts: {exc}") from exc
            delay = backoff_delay(retries, retry_base)
            log.info("transient backend error (%s); retrying in %.2fs", exc, delay)
            sleep(delay)
            retries += 1
    elapsed = (time.perf_counter() - start) * 1000.0
    latency = reply.latency_ms if reply.latency_ms is not None else elapsed
    record = CompletionRecord(key, prompt, reply.text, config.model, latency, reply.token_counts, retries)
    cache.put(record, config)
    return record
