from __future__ import annotations

import contextlib
import itertools
from pathlib import Path

import pytest

from relevancer.core import LabeledExample, QPPair, builtin_scheme
from relevancer.dataset import Dataset, save

FIXTURES = Path(__file__).parent / "fixtures"

ADJECTIVES = ["wood", "metal", "round", "modern", "rustic", "glass", "white", "oak", "small", "velvet"]
NOUNS = ["coffee table", "desk", "bookshelf", "armchair", "bed frame", "dresser", "bar stool",
         "floor lamp", "rug", "ottoman", "sofa", "nightstand"]
BRANDS = ["mikell", "ahern", "fromm", "bahareh", "radford", "berg", "hedda", "aule", "gillis",
          "corene", "mylor", "oday"]


def synthetic_examples(n: int, scheme_name: str = "wands", offset: int = 0,
                       with_rationale: bool = False) -> list[LabeledExample]:
    """Deterministic furniture-style pairs with labels cycling through the scheme."""
    scheme = builtin_scheme(scheme_name)
    combos = itertools.product(ADJECTIVES, NOUNS, BRANDS, range(1000))
    out = []
    for i, (adj, noun, brand, rep) in enumerate(itertools.islice(combos, offset, offset + n)):
        query = f"{adj} {noun}"
        title = f"{brand} {adj} {noun} model {rep}"
        label = scheme.labels[i % len(scheme.labels)]
        rationale = None
        if with_rationale:
            rationale = f"Let's think step by step: the title names a {noun} by {brand}, so it is {label}."
        out.append(LabeledExample(QPPair(query, title), label, rationale))
    return out


def synthetic_dataset(n: int, scheme_name: str = "wands", offset: int = 0,
                      with_rationale: bool = False, split: str = "synthetic") -> Dataset:
    return Dataset(builtin_scheme(scheme_name),
                   tuple(synthetic_examples(n, scheme_name, offset, with_rationale)), split)


@pytest.fixture
def wands():
    return builtin_scheme("wands")


@pytest.fixture
def esci():
    return builtin_scheme("esci")


@pytest.fixture
def test_and_pool(tmp_path):
    """300-pair test CSV and a disjoint 120-pair pool CSV with rationales."""
    test = synthetic_dataset(300, split="test")
    pool = synthetic_dataset(120, offset=5000, with_rationale=True, split="pool")
    test_path, pool_path = tmp_path / "test.csv", tmp_path / "pool.csv"
    save(test, test_path)
    save(pool, pool_path)
    return test_path, pool_path


REF_QUERY = "wood coffee table set by storage"
REF_TITLES = ["coffee table", "coffee table with storage", "onshuntay coffee table", "wooden coffee table",
             "wood coffee table", "ahern coffee table", "fromm wood table", "bahareh coffee table"]
REF_QUESTION = QPPair(REF_QUERY, "mikell 2 piece coffee table set")


def reference_examples() -> list[LabeledExample]:
    return [LabeledExample(QPPair(REF_QUERY, t), "Partial") for t in REF_TITLES]


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE: list[tuple[str, bool, str]] = []


@contextlib.contextmanager
def criterion(name: str):
    """Record PASS/FAIL for one acceptance criterion; the block may set ``detail['text']``."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE.append((name, False, detail["text"] or f"{type(exc).__name__}: {exc}"))
        raise
    ACCEPTANCE.append((name, True, detail["text"]))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, text in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({text})" if text else ""))
