"""Domain types shared by the whole pipeline: label schemes, pairs, predictions."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w

BUILTIN_SCHEMES = ("esci", "wands", "five_level")

# ASCII and typographic quotes stripped around raw labels.
_QUOTES = "\"'`‘’“”«»"


class RelevancerError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(RelevancerError):
    """Invalid configuration or usage."""


class DataError(RelevancerError):
    """Input data does not satisfy a contract."""


class UnknownScheme(ConfigError):
    pass


class UnknownLabel(DataError):
    def __init__(self, text: str, scheme: str, row: Optional[int] = None):
        self.text = text
        self.scheme = scheme
        self.row = row
        where = f" at row {row}" if row is not None else ""
        super().__init__(f"unknown label {text!r} for scheme {scheme!r}{where}")


def fold(text: str) -> str:
    return text.strip().casefold()


def pair_key(query: str, product_title: str) -> tuple[str, str]:
    """Identity of a pair for overlap and exclusion checks (fold-and-trim)."""
    return (fold(query), fold(product_title))


@dataclass(frozen=True)
class LabelScheme:
    name: str
    labels: tuple[str, ...]
    definitions: Mapping[str, str] = field(hash=False)

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "definitions", dict(self.definitions))
        if not labels:
            raise ConfigError(f"scheme {self.name!r} has no labels")
        folded = [fold(label) for label in labels]
        if len(set(folded)) != len(folded):
            raise ConfigError(f"scheme {self.name!r} has duplicate labels after case-folding")
        for label in labels:
            if not str(self.definitions.get(label, "")).strip():
                raise ConfigError(f"scheme {self.name!r}: label {label!r} has no definition")

    def __len__(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "labels": list(self.labels),
            "definitions": {label: self.definitions[label] for label in self.labels},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LabelScheme":
        try:
            return cls(str(data["name"]), tuple(data["labels"]), dict(data["definitions"]))
        except KeyError as exc:
            raise ConfigError(f"scheme definition missing field {exc.args[0]!r}") from None

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "LabelScheme":
        return cls.from_dict(tomllib.loads(text))


def normalize_label(text: str, scheme: LabelScheme) -> str:
    """Map raw label text onto the scheme's canonical spelling.

    Matching is case-insensitive and ignores surrounding whitespace and quotes.
    Raises UnknownLabel when nothing matches.
    """
    cleaned = text.strip().strip(_QUOTES).strip()
    wanted = cleaned.casefold()
    for label in scheme.labels:
        if label.casefold() == wanted:
            return label
    raise UnknownLabel(text, scheme.name)


def builtin_scheme(name: str) -> LabelScheme:
    if name not in BUILTIN_SCHEMES:
        raise UnknownScheme(f"unknown scheme {name!r}; expected one of {', '.join(BUILTIN_SCHEMES)}")
    text = resources.files("relevancer").joinpath("schemes", f"{name}.toml").read_text("utf-8")
    return LabelScheme.loads(text)


def load_scheme(ref: str | Path) -> LabelScheme:
    """Resolve a builtin scheme name or a path to a scheme TOML file."""
    if str(ref) in BUILTIN_SCHEMES:
        return builtin_scheme(str(ref))
    path = Path(ref)
    if not path.exists():
        raise UnknownScheme(f"{ref!r} is neither a builtin scheme nor a file")
    try:
        return LabelScheme.loads(path.read_text("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class QPPair:
    query: str
    product_title: str
    id: Optional[str] = None
    locale: Optional[str] = None

    def __post_init__(self):
        if not self.query.strip():
            raise DataError("query is empty")
        if not self.product_title.strip():
            raise DataError("product title is empty")

    @property
    def key(self) -> tuple[str, str]:
        return pair_key(self.query, self.product_title)

    def render(self) -> str:
        """Canonical single-line text of the pair, shared by embedding and prompts."""
        return f"query: {self.query}, product title: {self.product_title}"


@dataclass(frozen=True)
class LabeledExample:
    pair: QPPair
    label: str
    rationale: Optional[str] = None

    def __post_init__(self):
        if self.rationale is not None and not self.rationale.strip():
            raise DataError("rationale must be non-empty when present")

    def check(self, scheme: LabelScheme) -> None:
        if self.label not in scheme.labels:
            raise UnknownLabel(self.label, scheme.name)


@dataclass(frozen=True)
class Prediction:
    pair: QPPair
    gold: Optional[str]
    predicted: Optional[str]
    raw_response: str
    config_id: str
    latency_ms: float
    parse_error: Optional[str] = None
    prompt_hash: Optional[str] = None
    prompt: Optional[str] = None

    def __post_init__(self):
        if (self.predicted is None) == (self.parse_error is None):
            raise ValueError("exactly one of predicted / parse_error must be set")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")

    @property
    def ok(self) -> bool:
        return self.predicted is not None

    def to_json(self) -> dict[str, Any]:
        row: dict[str, Any] = {
            "query": self.pair.query,
            "product_title": self.pair.product_title,
            "gold": self.gold,
            "predicted": self.predicted,
            "parse_error": self.parse_error,
            "latency_ms": self.latency_ms,
            "config_id": self.config_id,
            "prompt_hash": self.prompt_hash,
            "raw_response": self.raw_response,
        }
        if self.prompt is not None:
            row["prompt"] = self.prompt
        return row

    @classmethod
    def from_json(cls, row: Mapping[str, Any]) -> "Prediction":
        return cls(
            pair=QPPair(row["query"], row["product_title"]),
            gold=row.get("gold"),
            predicted=row.get("predicted"),
            raw_response=row.get("raw_response", ""),
            config_id=row.get("config_id", ""),
            latency_ms=float(row.get("latency_ms", 0.0)),
            parse_error=row.get("parse_error"),
            prompt_hash=row.get("prompt_hash"),
            prompt=row.get("prompt"),
        )
