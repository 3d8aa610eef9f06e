import json
import math
import unicodedata

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relevancer.core import ConfigError, QPPair
from relevancer.embed import (
    DimensionMismatch,
    Embedder,
    EmbedderSpec,
    RemoteEmbedder,
    RemoteUnavailable,
    cosine,
    embed_pair,
    fnv1a_64,
    hash_embed,
)


def ref_fnv(data: bytes) -> int:
    # textbook FNV-1a 64, written independently of the library
    h = 14695981039346656037
    for byte in data:
        h ^= byte
        h = (h * 1099511628211) % 2**64
    return h


def ref_embed(text: str, dim: int) -> list[float]:
    s = "^" + unicodedata.normalize("NFC", text.lower()) + "$"
    acc = {}
    if len(s) > 2:
        for i in range(len(s) - 2):
            h = ref_fnv(s[i:i + 3].encode())
            acc[h % dim] = acc.get(h % dim, 0) + (1 if h < 2**63 else -1)
    out = [0.0] * dim
    norm = math.sqrt(sum(v * v for v in acc.values()))
    for b, v in acc.items():
        if norm:
            out[b] = v / norm
    return out


def test_fnv_reference_values():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"^ab") == ref_fnv(b"^ab") == 0xC37F601A13114326
    assert fnv1a_64(b"abc") == 0xE71FA2190541574B
    assert fnv1a_64(b"bc$") == 0x003F7219133E1B22


def test_abc_bucket_sign_pattern():
    # ^ab -> bucket 38 (top bit set), abc -> 11 (set), bc$ -> 34 (clear)
    v = hash_embed("abc", 64)
    assert list(np.flatnonzero(v)) == [11, 34, 38]
    third = 1 / math.sqrt(3)
    assert v[11] == pytest.approx(-third) and v[34] == pytest.approx(third) and v[38] == pytest.approx(-third)
    assert np.allclose(v, ref_embed("abc", 64), atol=1e-15)


def test_empty_text_is_zero_and_determinism():
    assert not hash_embed("", 256).any()
    assert hash_embed("aaa", 256).tobytes() == hash_embed("aaa", 256).tobytes()
    pair = QPPair("wood coffee table", "mikell oak coffee table")
    spec = EmbedderSpec()
    assert embed_pair(pair, spec).tobytes() == embed_pair(pair, spec).tobytes()


def test_case_and_normalization_insensitive():
    assert np.array_equal(hash_embed("Café", 64), hash_embed("café", 64))
    assert np.array_equal(hash_embed("SOFA", 64), hash_embed("sofa", 64))


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1, max_size=60), st.sampled_from([16, 64, 256]))
def test_unit_norm_matches_reference(text, dim):
    v = hash_embed(text, dim)
    assert v.shape == (dim,) and v.dtype == np.float64
    assert np.allclose(v, ref_embed(text, dim), atol=1e-12)
    n = float(np.linalg.norm(v))
    # trigrams can cancel to zero only through sign collisions
    assert abs(n - 1) < 1e-6 or n == 0


def test_shared_query_cosine_against_reference():
    a = QPPair("leather chair", "31\" wide top grain leather armchair")
    b = QPPair("leather chair", "faux leather office chair with arms")
    va, vb = embed_pair(a, EmbedderSpec()), embed_pair(b, EmbedderSpec())
    ra, rb = ref_embed(a.render(), 256), ref_embed(b.render(), 256)
    expected = sum(x * y for x, y in zip(ra, rb))
    assert -1 < cosine(va, vb) < 1
    assert cosine(va, vb) == pytest.approx(expected, abs=1e-12)
    assert cosine(va, va) == pytest.approx(1.0, abs=1e-12)
    assert cosine(va, np.zeros(256)) == 0.0


def test_pair_text_rendering_is_embedded():
    pair = QPPair("desk", "oak writing desk")
    assert np.array_equal(embed_pair(pair, EmbedderSpec(dim=64)),
                          hash_embed("query: desk, product title: oak writing desk", 64))


def test_spec_validation():
    with pytest.raises(ConfigError):
        EmbedderSpec(kind="remote")
    with pytest.raises(ConfigError):
        EmbedderSpec(dim=8)
    with pytest.raises(ConfigError):
        EmbedderSpec(kind="word2vec")


def _remote(handler, dim=3):
    spec = EmbedderSpec("remote", dim, "http://embed.local/v1/embeddings", "emb-small")
    client = httpx.Client(transport=httpx.MockTransport(handler))
    sleeps = []
    return RemoteEmbedder(spec, client, sleep=sleeps.append), sleeps


def test_remote_batches_and_renormalizes(monkeypatch):
    monkeypatch.setenv("RELEVANCER_EMBED_API_KEY", "k123")
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((len(body["input"]), request.headers.get("authorization")))
        return httpx.Response(200, json={"data": [{"embedding": [3.0, 0.0, 4.0]} for _ in body["input"]]})

    emb, _ = _remote(handler)
    out = emb.embed_texts([f"t{i}" for i in range(130)])
    assert [n for n, _ in seen] == [64, 64, 2]
    assert seen[0][1] == "Bearer k123"
    assert len(out) == 130 and np.allclose(out[0], [0.6, 0.0, 0.8])


def test_remote_retries_then_succeeds():
    codes = iter([503, 429, 200])

    def handler(request):
        code = next(codes)
        if code != 200:
            return httpx.Response(code)
        return httpx.Response(200, json={"embeddings": [[0.0, 2.0, 0.0]]})

    emb, sleeps = _remote(handler)
    assert np.allclose(emb.embed_texts(["x"])[0], [0, 1, 0])
    assert sleeps == [1.0, 2.0]


def test_remote_exhaustion_and_rejection_and_dims():
    emb, sleeps = _remote(lambda r: httpx.Response(500))
    with pytest.raises(RemoteUnavailable):
        emb.embed_texts(["x"])
    assert len(sleeps) == 3
    emb, _ = _remote(lambda r: httpx.Response(401))
    with pytest.raises(RemoteUnavailable):
        emb.embed_texts(["x"])
    emb, _ = _remote(lambda r: httpx.Response(200, json={"embeddings": [[1.0, 0.0]]}))
    with pytest.raises(DimensionMismatch):
        emb.embed_texts(["x"])


def test_embedder_dispatches_to_remote():
    emb, _ = _remote(lambda r: httpx.Response(200, json={"embeddings": [[0.0, 0.0, 5.0]]}))
    e = Embedder(emb.spec, remote=emb)
    assert np.allclose(e.embed_pair(QPPair("q", "t")), [0, 0, 1])
