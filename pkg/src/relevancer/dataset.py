"""Gold-labeled datasets: CSV ingest, canonical CSV output, stratified sampling."""

from __future__ import annotations

import csv
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from relevancer.core import (
    ConfigError,
    DataError,
    LabeledExample,
    LabelScheme,
    QPPair,
    UnknownLabel,
    normalize_label,
)
from relevancer.rng import Xoshiro256

CANONICAL_COLUMNS = ("query", "product_title", "label", "rationale")


class MissingColumn(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, row: int, reason: str):
        self.row = row
        super().__init__(f"row {row}: {reason}")


class InsufficientSupport(DataError):
    def __init__(self, label: str, available: int, needed: int):
        self.label = label
        self.available = available
        self.needed = needed
        super().__init__(f"class {label!r} has {available} examples, {needed} needed")


class IndivisibleTotal(DataError):
    pass


class SchemeMismatch(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    scheme: LabelScheme
    examples: tuple[LabeledExample, ...]
    split_name: str = "data"

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        for ex in self.examples:
            ex.check(self.scheme)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def class_counts(self) -> dict[str, int]:
        counts = {label: 0 for label in self.scheme.labels}
        for ex in self.examples:
            counts[ex.label] += 1
        return counts

    def gold_map(self) -> dict[tuple[str, str], str]:
        return {ex.pair.key: ex.label for ex in self.examples}


@dataclass(frozen=True)
class ColumnMapping:
    query_col: str = "query"
    title_col: str = "product_title"
    label_col: str = "label"
    rationale_col: Optional[str] = "rationale"
    label_map: Mapping[str, str] = field(default_factory=dict)
    delimiter: str = ","

    def __post_init__(self):
        cols = (self.query_col, self.title_col, self.label_col)
        if len(set(cols)) != 3:
            raise ConfigError("query, title and label columns must be distinct")
        if len(self.delimiter) != 1:
            raise ConfigError("delimiter must be a single character")

    def check(self, scheme: LabelScheme) -> None:
        for raw, canonical in self.label_map.items():
            if canonical not in scheme.labels:
                raise ConfigError(f"label_map {raw!r} -> {canonical!r} is not a {scheme.name} label")

    @classmethod
    def from_file(cls, path: str | Path) -> "ColumnMapping":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        allowed = {"query_col", "title_col", "label_col", "rationale_col", "label_map", "delimiter"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown column-mapping keys: {sorted(unknown)}")
        return cls(**data)


def load(path: str | Path, scheme: LabelScheme, mapping: ColumnMapping | None = None,
         split_name: str | None = None) -> Dataset:
    """Read a labeled CSV (RFC 4180 quoting). Row numbers in errors are 1-based data rows."""
    mapping = mapping or ColumnMapping()
    mapping.check(scheme)
    path = Path(path)
    examples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=mapping.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, no header") from None
        index = {name: i for i, name in enumerate(header)}
        for col in (mapping.query_col, mapping.title_col, mapping.label_col):
            if col not in index:
                raise MissingColumn(f"{path}: missing column {col!r}")
        rat_i = index.get(mapping.rationale_col) if mapping.rationale_col else None
        q_i, t_i, l_i = index[mapping.query_col], index[mapping.title_col], index[mapping.label_col]
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(rowno, f"expected {len(header)} fields, got {len(row)}")
            raw = row[l_i]
            raw = mapping.label_map.get(raw.strip(), raw)
            try:
                label = normalize_label(raw, scheme)
            except UnknownLabel:
                raise UnknownLabel(row[l_i], scheme.name, row=rowno) from None
            rationale = row[rat_i] if rat_i is not None and row[rat_i].strip() else None
            try:
                pair = QPPair(row[q_i], row[t_i])
            except DataError as exc:
                raise MalformedRow(rowno, str(exc)) from None
            examples.append(LabeledExample(pair, label, rationale))
    return Dataset(scheme, tuple(examples), split_name or path.stem)


def save(ds: Dataset | Iterable[LabeledExample], path: str | Path) -> None:
    """Write the canonical CSV; the rationale column is emitted only when some row has one."""
    examples = list(ds.examples if isinstance(ds, Dataset) else ds)
    with_rationale = any(ex.rationale for ex in examples)
    cols = CANONICAL_COLUMNS if with_rationale else CANONICAL_COLUMNS[:3]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for ex in examples:
            row = [ex.pair.query, ex.pair.product_title, ex.label]
            if with_rationale:
                row.append(ex.rationale or "")
            writer.writerow(row)


def stratified_sample(ds: Dataset, total: int, seed: int) -> Dataset:
    """Draw exactly total/len(scheme) examples per class, then shuffle the result.

    Per class (in scheme order) a partial Fisher-Yates draw picks the members; the
    concatenation is then shuffled by the same generator.
    """
    n_classes = len(ds.scheme)
    if total <= 0:
        raise IndivisibleTotal("total must be positive")
    if total % n_classes:
        raise IndivisibleTotal(f"{total} is not divisible by {n_classes} classes")
    per_class = total // n_classes
    by_label: dict[str, list[int]] = defaultdict(list)
    for i, ex in enumerate(ds.examples):
        by_label[ex.label].append(i)
    rng = Xoshiro256(seed)
    picked: list[int] = []
    for label in ds.scheme.labels:
        members = by_label.get(label, [])
        if len(members) < per_class:
            raise InsufficientSupport(label, len(members), per_class)
        picked.extend(rng.sample(members, per_class))
    rng.shuffle(picked)
    return Dataset(ds.scheme, tuple(ds.examples[i] for i in picked), f"{ds.split_name}-sample{total}")


def exclude_overlap(pool: Dataset, test: Dataset) -> Dataset:
    if pool.scheme.labels != test.scheme.labels:
        raise SchemeMismatch(f"pool scheme {pool.scheme.name!r} differs from test scheme {test.scheme.name!r}")
    banned = {ex.pair.key for ex in test.examples}
    kept = tuple(ex for ex in pool.examples if ex.pair.key not in banned)
    return Dataset(pool.scheme, kept, pool.split_name)
