"""Query-product relevance labeling with retrieval-augmented, diversity-selected few-shot prompts."""

from relevancer.core import (
    LabeledExample,
    LabelScheme,
    Prediction,
    QPPair,
    builtin_scheme,
    load_scheme,
    normalize_label,
)

__version__ = "0.1.0"

__all__ = [
    "LabeledExample",
    "LabelScheme",
    "Prediction",
    "QPPair",
    "builtin_scheme",
    "load_scheme",
    "normalize_label",
]
