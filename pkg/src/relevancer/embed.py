"""Text embedders: deterministic trigram hashing and a remote HTTP embeddings client."""

from __future__ import annotations

import math
import os
import time
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import httpx
import numpy as np

from relevancer.core import ConfigError, QPPair, RelevancerError


DEFAULT_DIM = 256
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1
API_KEY_ENV = "RELEVANCER_EMBED_API_KEY"
REMOTE_BATCH = 64
REMOTE_RETRIES = 3


class RemoteUnavailable(RelevancerError):
    pass


class DimensionMismatch(RelevancerError):
    pass


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "hash"
    dim: int = DEFAULT_DIM
    endpoint: Optional[str] = None
    model: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("hash", "remote"):
            raise ConfigError(f"unknown embedder kind {self.kind!r}")
        if self.dim <= 0:
            raise ConfigError("embedding dim must be positive")
        if self.kind == "hash" and self.dim < 16:
            raise ConfigError("hash embedder needs dim >= 16")
        if self.kind == "remote" and not (self.endpoint and self.model):
            raise ConfigError("remote embedder requires endpoint and model")

    def to_dict(self) -> dict:
        return {k: v for k, v in vars(self).items() if v is not None}


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@lru_cache(maxsize=1 << 18)
def _trigram_hash(gram: str) -> int:
    return fnv1a_64(gram.encode("utf-8"))


def trigrams(text: str) -> list[str]:
    """Character trigrams of the lowercased, NFC-normalized text padded with ^ and $."""
    norm = unicodedata.normalize("NFC", text.lower())
    if not norm:
        return []
    padded = f"^{norm}$"
    return [padded[i:i + 3] for i in range(len(padded) - 2)]


def hash_embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed feature hashing of character trigrams into an L2-normalized float64 vector.

    bucket = FNV-1a-64(trigram) mod dim; the sign is negative when the top hash bit is
    set. Empty text maps to the all-zero vector.
    """
    if dim < 16:
        raise ValueError("dim must be >= 16")
    vec = np.zeros(dim, dtype=np.float64)
    for gram in trigrams(text):
        h = _trigram_hash(gram)
        vec[h % dim] += -1.0 if h >> 63 else 1.0
    norm = math.sqrt(float(np.dot(vec, vec)))
    if norm > 0:
        vec /= norm
    return vec


def unit(vec: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DimensionMismatch("embedding contains non-finite values")
    norm = float(np.linalg.norm(arr))
    return arr / norm if norm > 0 else np.zeros_like(arr)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


class RemoteEmbedder:
    """Client for an HTTP+JSON embeddings endpoint.

    Request body ``{"model": ..., "input": [texts]}``; the response carries the vectors
    either as ``{"data": [{"embedding": [...]}, ...]}`` or ``{"embeddings": [[...], ...]}``.
    """

    def __init__(self, spec: EmbedderSpec, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if spec.kind != "remote":
            raise ConfigError("RemoteEmbedder needs a remote spec")
        self.spec = spec
        self._client = client or httpx.Client(timeout=60.0)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(API_KEY_ENV)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _post(self, texts: list[str]) -> list[list[float]]:
        body = {"model": self.spec.model, "input": texts}
        last: Exception | None = None
        for attempt in range(REMOTE_RETRIES + 1):
            if attempt:
                self._sleep(2.0 ** (attempt - 1))
            try:
                resp = self._client.post(self.spec.endpoint, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = RemoteUnavailable(f"embedding endpoint returned {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise RemoteUnavailable(f"embedding endpoint rejected request: {resp.status_code}")
            payload = resp.json()
            if "data" in payload:
                return [item["embedding"] for item in payload["data"]]
            return payload["embeddings"]
        raise RemoteUnavailable(f"embedding endpoint unavailable after retries: {last}")

    def embed_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for start in range(0, len(texts), REMOTE_BATCH):
            batch = list(texts[start:start + REMOTE_BATCH])
            vectors = self._post(batch)
            if len(vectors) != len(batch):
                raise RemoteUnavailable("embedding endpoint returned wrong number of vectors")
            for v in vectors:
                if len(v) != self.spec.dim:
                    raise DimensionMismatch(f"expected dim {self.spec.dim}, got {len(v)}")
                out.append(unit(v))
        return out


class Embedder:
    """Embeds pairs according to an EmbedderSpec."""

    def __init__(self, spec: EmbedderSpec, remote: RemoteEmbedder | None = None):
        self.spec = spec
        self._remote = remote
        if spec.kind == "remote" and remote is None:
            self._remote = RemoteEmbedder(spec)

    def embed_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        if self.spec.kind == "hash":
            return [hash_embed(t, self.spec.dim) for t in texts]
        return self._remote.embed_texts(texts)

    def embed_pairs(self, pairs: Sequence[QPPair]) -> list[np.ndarray]:
        return self.embed_texts([p.render() for p in pairs])

    def embed_pair(self, pair: QPPair) -> np.ndarray:
        return self.embed_pairs([pair])[0]


def embed_pair(pair: QPPair, spec: EmbedderSpec) -> np.ndarray:
    return Embedder(spec).embed_pair(pair)
