"""Scoring predictions against gold: confusion matrix, accuracy, macro and weighted F1."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from relevancer.core import DataError, LabelScheme, Prediction, UnknownLabel

INVALID = "INVALID"


class MissingGold(DataError):
    pass


class EmptyMatrix(DataError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are gold labels in scheme order; columns are scheme labels then INVALID."""

    scheme: LabelScheme
    counts: tuple[tuple[int, ...], ...]

    @property
    def columns(self) -> tuple[str, ...]:
        return self.scheme.labels + (INVALID,)

    def get(self, gold: str, predicted: str) -> int:
        return self.counts[self.scheme.labels.index(gold)][self.columns.index(predicted)]

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def as_dict(self) -> dict[tuple[str, str], int]:
        return {(g, p): self.counts[i][j]
                for i, g in enumerate(self.scheme.labels)
                for j, p in enumerate(self.columns)}


def confusion(preds: Iterable[Prediction], scheme: LabelScheme) -> ConfusionMatrix:
    labels = scheme.labels
    size = len(labels)
    grid = [[0] * (size + 1) for _ in range(size)]
    for p in preds:
        if p.gold is None:
            raise MissingGold(f"prediction for {p.pair.render()!r} has no gold label")
        if p.gold not in labels:
            raise UnknownLabel(p.gold, scheme.name)
        col = size if p.parse_error is not None else labels.index(p.predicted)
        grid[labels.index(p.gold)][col] += 1
    return ConfusionMatrix(scheme, tuple(tuple(row) for row in grid))


@dataclass(frozen=True)
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class: Mapping[str, ClassStats]
    macro_f1: float
    weighted_f1: float
    n: int
    invalid: int


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, per-class precision/recall/F1 and their macro and support-weighted means.

    0/0 is taken as 0 throughout. Macro F1 averages over every scheme label, including
    labels with no support. INVALID predictions count as misses for their gold class.
    Everything is computed in exact rationals and rounded to float once at the end.
    """
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    labels = cm.scheme.labels
    size = len(labels)
    f1s: list[Fraction] = []
    per_class: dict[str, ClassStats] = {}
    for i, label in enumerate(labels):
        tp = cm.counts[i][i]
        support = sum(cm.counts[i])
        predicted = sum(cm.counts[r][i] for r in range(size))
        precision = _ratio(tp, predicted)
        recall = _ratio(tp, support)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
        f1s.append(f1)
        per_class[label] = ClassStats(float(precision), float(recall), float(f1), support)
    correct = sum(cm.counts[i][i] for i in range(size))
    supports = [sum(row) for row in cm.counts]
    weighted = sum((Fraction(s, total) * f for s, f in zip(supports, f1s)), Fraction(0))
    return MetricsReport(
        accuracy=float(Fraction(correct, total)),
        per_class=per_class,
        macro_f1=float(sum(f1s, Fraction(0)) / size),
        weighted_f1=float(weighted),
        n=total,
        invalid=sum(row[size] for row in cm.counts),
    )


def score(preds: Iterable[Prediction], scheme: LabelScheme) -> MetricsReport:
    return metrics(confusion(preds, scheme))


SORT_KEYS = ("weighted_f1", "macro_f1", "accuracy", "config_id")


@dataclass(frozen=True)
class TableRow:
    config_id: str
    accuracy: float
    macro_f1: float
    weighted_f1: float

    def cells(self) -> list[str]:
        return [self.config_id, f"{self.accuracy:.3f}", f"{self.macro_f1:.3f}", f"{self.weighted_f1:.3f}"]

    def latex(self) -> str:
        return " & ".join(self.cells())


def compare(reports: Sequence[tuple[str, MetricsReport]], key: str = "weighted_f1",
            descending: bool = True) -> list[TableRow]:
    """Rank configurations; equal keys fall back to ascending config_id."""
    rows = [TableRow(cid, r.accuracy, r.macro_f1, r.weighted_f1) for cid, r in reports]
    return sort_rows(rows, key, descending)


def sort_rows(rows: Sequence[TableRow], key: str = "weighted_f1", descending: bool = True) -> list[TableRow]:
    if key not in SORT_KEYS:
        raise ValueError(f"sort key must be one of {SORT_KEYS}")
    if key == "config_id":
        return sorted(rows, key=lambda r: r.config_id, reverse=descending)
    ordered = sorted(rows, key=lambda r: r.config_id)
    return sorted(ordered, key=lambda r: getattr(r, key), reverse=descending)


HEADER = ("Configuration", "Acc.", "F1", "F1w")


def render_table(rows: Sequence[TableRow], fmt: str = "md") -> str:
    body = [r.cells() for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["config_id", "accuracy", "macro_f1", "weighted_f1"])
        writer.writerows(body)
        return buf.getvalue()
    if fmt == "latex":
        return "".join(r.latex() + " \\\\\n" for r in rows)
    if fmt != "md":
        raise ValueError(f"unknown table format {fmt!r}")
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(HEADER)]

    def line(cells):
        padded = [c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))]
        return "| " + " | ".join(padded) + " |"

    sep = "|" + "|".join(("-" * (w + 2)) if i == 0 else ("-" * (w + 1) + ":") for i, w in enumerate(widths)) + "|"
    return "\n".join([line(HEADER), sep, *(line(b) for b in body)]) + "\n"


def metrics_columns(scheme: LabelScheme) -> list[str]:
    cols = ["config_id", "accuracy", "macro_f1", "weighted_f1", "n", "invalid"]
    for label in scheme.labels:
        cols += [f"precision_{label}", f"recall_{label}", f"f1_{label}", f"support_{label}"]
    return cols


def metrics_row(config_id: str, report: MetricsReport) -> dict[str, object]:
    row: dict[str, object] = {
        "config_id": config_id,
        "accuracy": repr(report.accuracy),
        "macro_f1": repr(report.macro_f1),
        "weighted_f1": repr(report.weighted_f1),
        "n": report.n,
        "invalid": report.invalid,
    }
    for label, st in report.per_class.items():
        row[f"precision_{label}"] = repr(st.precision)
        row[f"recall_{label}"] = repr(st.recall)
        row[f"f1_{label}"] = repr(st.f1)
        row[f"support_{label}"] = st.support
    return row


def write_metrics_csv(path, reports: Sequence[tuple[str, MetricsReport]], scheme: LabelScheme,
                      extra_columns: Sequence[str] = (), extras: Optional[Sequence[Mapping]] = None) -> None:
    cols = metrics_columns(scheme) + list(extra_columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for i, (cid, rep) in enumerate(reports):
            row = metrics_row(cid, rep)
            if extras is not None:
                row.update(extras[i])
            writer.writerow(row)


def read_table_rows(path) -> list[TableRow]:
    """Read any CSV carrying config_id, accuracy, macro_f1, weighted_f1 columns."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            try:
                rows.append(TableRow(rec["config_id"], float(rec["accuracy"]),
                                     float(rec["macro_f1"]), float(rec["weighted_f1"])))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}: bad report row {rec}: {exc}") from None
    return rows
