"""Few-shot demonstration selection and prompt assembly."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from relevancer.core import ConfigError, DataError, LabeledExample, LabelScheme, QPPair
from relevancer.dataset import Dataset
from relevancer.rng import Xoshiro256, derive_seed
from relevancer.vectorstore import Store

STRATEGIES = ("zero_shot", "random_fs", "rag_fs", "rag_mmr_fs")
GRID_K = (0, 8, 16)
COT_CUE = "Let's think step by step"

TASK_SENTENCE = (
    "You are a search engine in an eCommerce website. For a given customer query and a "
    "product title, please annotate each product title in the list as one of these options: {options}."
)
FORMAT_SENTENCE = (
    'The response should be in a python dictionary format {{"rating":label}}, '
    "where label which is either {either}."
)
COT_SENTENCE = (
    f"{COT_CUE}: before the rating, explain in one line why the label fits the pair, "
    "as shown in the examples."
)
EXAMPLES_HEADER = "#### Here are some examples:"
QUESTION_HEADER = "Now rate the relevance of this pair:"


class PoolTooSmall(DataError):
    pass


class MissingRationale(DataError):
    pass


class ExampleCountMismatch(DataError):
    pass


def format_lambda(lam: float) -> str:
    """Shortest decimal spelling: 0, 0.25, 0.5, 0.75, 1."""
    text = repr(float(lam))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class PromptConfig:
    strategy: str
    scheme: LabelScheme
    k: int = 0
    lam: Optional[float] = None
    cot: bool = False
    seed: int = 0
    reverse: bool = False
    pool_size: Optional[int] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if (self.k == 0) != (self.strategy == "zero_shot"):
            raise ConfigError("k must be 0 exactly when the strategy is zero_shot")
        if self.k < 0:
            raise ConfigError("k must be non-negative")
        if (self.lam is not None) != (self.strategy == "rag_mmr_fs"):
            raise ConfigError("lambda is required for rag_mmr_fs and only for it")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")

    @property
    def is_grid(self) -> bool:
        return self.k in GRID_K

    @property
    def name(self) -> str:
        """Row-name suffix: VANILLA, 8_FS, 16_FS_COT, 8_FS_RAG, 16_FS_RAG_MMR_0.25, ..."""
        if self.strategy == "zero_shot":
            base = "VANILLA"
        elif self.strategy == "random_fs":
            base = f"{self.k}_FS"
        elif self.strategy == "rag_fs":
            base = f"{self.k}_FS_RAG"
        else:
            base = f"{self.k}_FS_RAG_MMR_{format_lambda(self.lam)}"
        return base + "_COT" if self.cot else base


_NAME_RE = re.compile(
    r"^(?:(?P<vanilla>VANILLA)|(?P<k>\d+)_FS(?P<rag>_RAG(?:_MMR_(?P<lam>\d+(?:\.\d+)?))?)?)(?P<cot>_COT)?$"
)


def parse_name(name: str, scheme: LabelScheme, seed: int = 0) -> PromptConfig:
    """Inverse of PromptConfig.name."""
    m = _NAME_RE.match(name)
    if not m:
        raise ConfigError(f"cannot parse configuration name {name!r}")
    cot = bool(m.group("cot"))
    if m.group("vanilla"):
        return PromptConfig("zero_shot", scheme, 0, cot=cot, seed=seed)
    k = int(m.group("k"))
    if not m.group("rag"):
        return PromptConfig("random_fs", scheme, k, cot=cot, seed=seed)
    if m.group("lam") is None:
        return PromptConfig("rag_fs", scheme, k, cot=cot, seed=seed)
    return PromptConfig("rag_mmr_fs", scheme, k, lam=float(m.group("lam")), cot=cot, seed=seed)


@dataclass(frozen=True)
class AssembledPrompt:
    text: str
    example_ids: tuple[int, ...]
    config_id: str

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def _quoted(labels: Sequence[str]) -> list[str]:
    return [f"'{label}'" for label in labels]


def _either(labels: Sequence[str]) -> str:
    q = _quoted(labels)
    if len(q) == 1:
        return q[0]
    if len(q) == 2:
        return f"{q[0]} or {q[1]}"
    return ", ".join(q[:-1]) + f", or {q[-1]}"


def instruction_block(scheme: LabelScheme, cot: bool = False) -> str:
    lines = [TASK_SENTENCE.format(options=", ".join(_quoted(scheme.labels)))]
    lines += [f"{label} : {scheme.definitions[label]}" for label in scheme.labels]
    lines.append(FORMAT_SENTENCE.format(either=_either(scheme.labels)))
    if cot:
        lines.append(COT_SENTENCE)
    return "\n".join(lines)


def rationale_line(rationale: str) -> str:
    text = " ".join(rationale.split())
    return text if text.startswith(COT_CUE) else f"{COT_CUE}: {text}"


def render_example(example: LabeledExample, cot: bool = False) -> str:
    lines = [example.pair.render()]
    if cot:
        if not example.rationale:
            raise MissingRationale(f"example {example.pair.render()!r} has no rationale")
        lines.append(rationale_line(example.rationale))
    lines.append(f"{{'rating': '{example.label}'}}")
    return "\n".join(lines)


def assemble(config: PromptConfig, question: QPPair, examples: Sequence[LabeledExample],
             example_ids: Sequence[int] = (), config_id: str = "") -> AssembledPrompt:
    """Build the prompt text. The result ends with the question line and no newline."""
    if len(examples) != config.k:
        raise ExampleCountMismatch(f"expected {config.k} examples, got {len(examples)}")
    parts = [instruction_block(config.scheme, config.cot)]
    if examples:
        ordered = list(reversed(examples)) if config.reverse else list(examples)
        parts.append(EXAMPLES_HEADER)
        parts.extend(render_example(ex, config.cot) for ex in ordered)
        if config.reverse:
            example_ids = tuple(reversed(tuple(example_ids)))
    parts.append(f"{QUESTION_HEADER}\n{question.render()}")
    return AssembledPrompt("\n\n".join(parts), tuple(example_ids), config_id or config.name)


def select_demos(config: PromptConfig, question: QPPair, pool: Dataset | None = None,
                 store: Store | None = None, query_vec=None,
                 embedder=None) -> list[tuple[int, LabeledExample]]:
    """Pick (id, example) demonstrations in selection order, most relevant first.

    Ids index ``pool`` for random_fs and are store ids for the retrieval strategies.
    The question pair itself is never selected.
    """
    if config.strategy == "zero_shot":
        return []
    exclude = {question.key}
    if config.strategy == "random_fs":
        if pool is None:
            raise ConfigError("random_fs needs a pool")
        eligible = [i for i, ex in enumerate(pool.examples) if ex.pair.key not in exclude]
        if len(eligible) < config.k:
            raise PoolTooSmall(f"pool has {len(eligible)} usable examples, {config.k} needed")
        rng = Xoshiro256(derive_seed(config.seed, question.query, question.product_title))
        chosen = [(i, pool.examples[i]) for i in rng.sample(eligible, config.k)]
    else:
        if store is None:
            raise ConfigError(f"{config.strategy} needs a vector store")
        if query_vec is None:
            if embedder is None:
                from relevancer.embed import Embedder

                if store.embedder is None:
                    raise ConfigError("store carries no embedder spec; pass an embedder")
                embedder = Embedder(store.embedder)
            query_vec = embedder.embed_pair(question)
        if config.strategy == "rag_fs":
            hits = store.top_k(query_vec, config.k, exclude=exclude)
        else:
            hits = store.mmr_select(query_vec, config.k, config.lam, pool=config.pool_size,
                                    exclude=exclude)
        if len(hits) < config.k:
            raise PoolTooSmall(f"store returned {len(hits)} examples, {config.k} needed")
        chosen = [(h.id, h.example) for h in hits]
    if config.cot:
        for _, ex in chosen:
            if not ex.rationale:
                raise MissingRationale(f"example {ex.pair.render()!r} has no rationale")
    return chosen


def select_examples(config: PromptConfig, question: QPPair, pool: Dataset | None = None,
                    store: Store | None = None, **kwargs) -> list[LabeledExample]:
    return [ex for _, ex in select_demos(config, question, pool, store, **kwargs)]
