"""Brute-force reference implementations used as test oracles.

Written in plain Python with no numpy and no code shared with the package.
"""

from __future__ import annotations

import math
from collections import Counter


def cos(a, b) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def top_k(vectors, q, k, banned=frozenset()):
    """Indices sorted by (cosine desc, index asc), skipping banned indices."""
    idx = [i for i in range(len(vectors)) if i not in banned]
    idx.sort(key=lambda i: (-round(cos(vectors[i], q), 12), i))
    return idx[:k]


def mmr(vectors, q, k, lam, pool=None, banned=frozenset()):
    """Greedy MMR straight from the formula.

    score(d) = lam * cos(d, q) - (1 - lam) * max_{s in R} cos(d, s), with the first pick
    being the best cos(d, q). Scores within 1e-12 of the best are ties, broken by higher
    cos(d, q) (rounded to 12 places), then lower index.
    """
    pool = max(10 * k, 64) if pool is None else pool
    cand = top_k(vectors, q, pool, banned)
    chosen: list[int] = []
    while cand and len(chosen) < k:
        def score(i):
            rel = cos(vectors[i], q)
            if not chosen:
                return rel
            return lam * rel - (1 - lam) * max(cos(vectors[i], vectors[j]) for j in chosen)
        scores = {i: score(i) for i in cand}
        top = max(scores.values())
        tied = [i for i in cand if scores[i] >= top - 1e-12]
        best = min(tied, key=lambda i: (-round(cos(vectors[i], q), 12), i))
        chosen.append(best)
        cand.remove(best)
    return chosen


def score(gold, pred, labels):
    """Accuracy, per-class F1, macro F1 and support-weighted F1 by direct counting.

    ``pred`` entries outside ``labels`` (e.g. None) count as wrong for every class.
    """
    n = len(gold)
    correct = sum(1 for g, p in zip(gold, pred) if g == p)
    support = Counter(gold)
    f1 = {}
    for c in labels:
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, pred) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, pred) if g == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1[c] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    macro = sum(f1.values()) / len(labels)
    weighted = sum(f1[c] * support[c] for c in labels) / n
    return {"accuracy": correct / n, "f1": f1, "macro_f1": macro, "weighted_f1": weighted}


def binom_central_interval(n: int, p: float, coverage: float = 0.99) -> tuple[int, int]:
    """Smallest [lo, hi] with P(X < lo) <= a/2 and P(X > hi) <= a/2 for X ~ Bin(n, p)."""
    alpha = (1 - coverage) / 2
    pmf = [math.comb(n, j) * p**j * (1 - p) ** (n - j) for j in range(n + 1)]
    lo, acc = 0, 0.0
    while acc + pmf[lo] <= alpha:
        acc += pmf[lo]
        lo += 1
    hi, acc = n, 0.0
    while acc + pmf[hi] <= alpha:
        acc += pmf[hi]
        hi -= 1
    return lo, hi
