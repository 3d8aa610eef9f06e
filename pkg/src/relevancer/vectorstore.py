"""In-memory store of embedded labeled examples: exact cosine top-k and greedy MMR.

Persistence is a line-delimited file. The first line is a JSON header::

    {"format": "relevancer-store", "version": 1, "dim": 256, "count": N,
     "frozen": true, "scheme": {...} | null, "embedder": {...} | null}

followed by one JSON object per entry, in id order::

    {"id": 0, "query": ..., "product_title": ..., "label": ..., "rationale": ... | null,
     "vector": "<base64 of the float64 values, little-endian>"}

Vectors are stored as raw IEEE-754 bytes so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import base64
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Iterable, Optional

import numpy as np

from relevancer.core import (
    ConfigError,
    DataError,
    LabeledExample,
    LabelScheme,
    QPPair,
    RelevancerError,
)
from relevancer.embed import DimensionMismatch, EmbedderSpec

FORMAT = "relevancer-store"
VERSION = 1

PairKey = tuple[str, str]


class Frozen(RelevancerError):
    pass


class NotFrozen(RelevancerError):
    pass


class EmptyStore(RelevancerError):
    pass


class BadLambda(ConfigError):
    pass


class StoreFormatError(DataError):
    pass


# Similarities are ranked after rounding to this many decimals, and MMR scores within
# TIE_EPS of the best count as ties, so mathematically equal values that differ only
# by floating-point evaluation order resolve through the declared tie-breaks.
RANK_DECIMALS = 12
TIE_EPS = 1e-12


def default_pool(k: int) -> int:
    return max(10 * k, 64)


@dataclass(frozen=True, eq=False)
class StoredExample:
    id: int
    example: LabeledExample
    vector: np.ndarray

    @property
    def key(self) -> PairKey:
        return self.example.pair.key


class Store:
    def __init__(self, dim: int, scheme: LabelScheme | None = None,
                 embedder: EmbedderSpec | None = None):
        if dim <= 0:
            raise ConfigError("store dim must be positive")
        self.dim = dim
        self.scheme = scheme
        self.embedder = embedder
        self.entries: list[StoredExample] = []
        self.frozen = False
        self._matrix: np.ndarray | None = None
        self._norms: np.ndarray | None = None
        self._by_key: dict[PairKey, list[int]] = defaultdict(list)

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, example: LabeledExample, vector) -> int:
        if self.frozen:
            raise Frozen("store is frozen")
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"expected dim {self.dim}, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise DimensionMismatch("vector has non-finite entries")
        if self.scheme is not None:
            example.check(self.scheme)
        vec = vec.copy()
        vec.setflags(write=False)
        new_id = len(self.entries)
        self.entries.append(StoredExample(new_id, example, vec))
        self._by_key[example.pair.key].append(new_id)
        return new_id

    def freeze(self) -> "Store":
        if not self.frozen:
            if self.entries:
                self._matrix = np.vstack([e.vector for e in self.entries])
            else:
                self._matrix = np.zeros((0, self.dim))
            self._norms = np.linalg.norm(self._matrix, axis=1)
            self.frozen = True
        return self

    def examples(self) -> list[LabeledExample]:
        return [e.example for e in self.entries]

    def _ready(self) -> None:
        if not self.frozen:
            raise NotFrozen("store must be frozen before querying")
        if not self.entries:
            raise EmptyStore("store has no entries")

    def similarities(self, query_vec) -> np.ndarray:
        """Cosine of every entry against query_vec; zero vectors score 0."""
        self._ready()
        q = np.asarray(query_vec, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"expected dim {self.dim}, got shape {q.shape}")
        qn = float(np.linalg.norm(q))
        denom = self._norms * qn
        dots = self._matrix @ q
        out = np.zeros(len(self.entries), dtype=np.float64)
        nz = denom > 0
        out[nz] = dots[nz] / denom[nz]
        return out

    def _top_indices(self, sims: np.ndarray, k: int, exclude: Collection[PairKey]) -> np.ndarray:
        work = np.round(sims, RANK_DECIMALS)
        available = len(sims)
        if exclude:
            banned = [i for key in exclude for i in self._by_key.get(key, ())]
            if banned:
                work[banned] = -np.inf
                available -= len(set(banned))
        k = min(k, available)
        if k <= 0:
            return np.zeros(0, dtype=np.int64)
        if k < len(work):
            part = np.argpartition(-work, k - 1)[:k]
            threshold = work[part].min()
            cand = np.flatnonzero(work >= threshold)
        else:
            cand = np.flatnonzero(work > -np.inf)
        # descending similarity, ascending id among equals
        order = np.lexsort((cand, -work[cand]))
        return cand[order][:k]

    def top_k(self, query_vec, k: int, exclude: Collection[PairKey] = ()) -> list[StoredExample]:
        if k < 1:
            raise ConfigError("k must be >= 1")
        sims = self.similarities(query_vec)
        return [self.entries[i] for i in self._top_indices(sims, k, exclude)]

    def top_k_scored(self, query_vec, k: int,
                     exclude: Collection[PairKey] = ()) -> list[tuple[StoredExample, float]]:
        if k < 1:
            raise ConfigError("k must be >= 1")
        sims = self.similarities(query_vec)
        return [(self.entries[i], float(sims[i])) for i in self._top_indices(sims, k, exclude)]

    def mmr_select(self, query_vec, k: int, lam: float, pool: Optional[int] = None,
                   exclude: Collection[PairKey] = ()) -> list[StoredExample]:
        """Greedy maximal marginal relevance over the top-``pool`` candidates.

        The first pick is the most similar candidate. Each later pick maximizes
        lam * cos(d, q) - (1 - lam) * max over selected s of cos(d, s). Equal scores
        (within TIE_EPS) go to the higher query similarity, then the lower id.
        """
        if not 0.0 <= lam <= 1.0:
            raise BadLambda(f"lambda must be in [0, 1], got {lam}")
        if k < 1:
            raise ConfigError("k must be >= 1")
        pool = default_pool(k) if pool is None else pool
        if pool < k:
            raise ConfigError(f"pool ({pool}) must be >= k ({k})")
        sims = self.similarities(query_vec)
        cand = self._top_indices(sims, pool, exclude)
        if len(cand) == 0:
            return []
        rel = sims[cand]
        vecs = self._matrix[cand]
        norms = self._norms[cand]
        safe = np.where(norms > 0, norms, 1.0)
        unit_vecs = vecs / safe[:, None]
        pairwise = unit_vecs @ unit_vecs.T

        picked = [0]
        taken = np.zeros(len(cand), dtype=bool)
        taken[0] = True
        max_sim = pairwise[:, 0].copy()
        while len(picked) < min(k, len(cand)):
            score = lam * rel - (1.0 - lam) * max_sim
            score[taken] = -np.inf
            # cand is sorted by (rel desc, id asc), so the first near-maximum honors the tie-break
            j = int(np.flatnonzero(score >= score.max() - TIE_EPS)[0])
            picked.append(j)
            taken[j] = True
            np.maximum(max_sim, pairwise[:, j], out=max_sim)
        return [self.entries[int(cand[j])] for j in picked]

    # persistence

    def save(self, path: str | Path) -> None:
        header = {
            "format": FORMAT,
            "version": VERSION,
            "dim": self.dim,
            "count": len(self.entries),
            "frozen": self.frozen,
            "scheme": self.scheme.to_dict() if self.scheme else None,
            "embedder": self.embedder.to_dict() if self.embedder else None,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, ensure_ascii=False) + "\n")
            for e in self.entries:
                row = {
                    "id": e.id,
                    "query": e.example.pair.query,
                    "product_title": e.example.pair.product_title,
                    "label": e.example.label,
                    "rationale": e.example.rationale,
                    "vector": base64.b64encode(e.vector.astype("<f8").tobytes()).decode("ascii"),
                }
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Store":
        with open(path, encoding="utf-8") as fh:
            try:
                header = json.loads(fh.readline())
            except json.JSONDecodeError:
                raise StoreFormatError(f"{path}: not a store file") from None
            if header.get("format") != FORMAT:
                raise StoreFormatError(f"{path}: not a store file")
            if header.get("version") != VERSION:
                raise StoreFormatError(f"{path}: unsupported store version {header.get('version')}")
            scheme = LabelScheme.from_dict(header["scheme"]) if header.get("scheme") else None
            embedder = EmbedderSpec(**header["embedder"]) if header.get("embedder") else None
            store = cls(int(header["dim"]), scheme, embedder)
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                row = json.loads(line)
                if row["id"] != len(store.entries):
                    raise StoreFormatError(f"{path}:{lineno}: ids out of order")
                vec = np.frombuffer(base64.b64decode(row["vector"]), dtype="<f8").astype(np.float64)
                example = LabeledExample(QPPair(row["query"], row["product_title"]),
                                         row["label"], row.get("rationale"))
                store.insert(example, vec)
        if len(store.entries) != header["count"]:
            raise StoreFormatError(f"{path}: expected {header['count']} entries, found {len(store.entries)}")
        if header.get("frozen"):
            store.freeze()
        return store


def build_store(examples: Iterable[LabeledExample], embedder, scheme: LabelScheme | None = None) -> Store:
    """Embed and insert every example, then freeze. ``embedder`` is an ``embed.Embedder``."""
    examples = list(examples)
    vectors = embedder.embed_pairs([ex.pair for ex in examples])
    store = Store(embedder.spec.dim, scheme, embedder.spec)
    for ex, vec in zip(examples, vectors):
        store.insert(ex, vec)
    return store.freeze()
