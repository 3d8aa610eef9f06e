"""Label one pair or a whole test set: select demos, assemble, complete, parse."""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from relevancer.core import (
    ConfigError,
    DataError,
    LabelScheme,
    Prediction,
    QPPair,
    RelevancerError,
    UnknownLabel,
    normalize_label,
)
from relevancer.dataset import Dataset
from relevancer.embed import Embedder
from relevancer.llmclient import (
    Backend,
    BackendRejected,
    BackendUnavailable,
    Cache,
    LlmConfig,
    UnknownPair,
    complete,
)
from relevancer.promptkit import PromptConfig, assemble, select_demos
from relevancer.vectorstore import Store

log = logging.getLogger(__name__)

# {"rating": X} / {'rating': 'X'} / {"rating":X}, optionally followed by more keys
_RATING_RE = re.compile(
    r"""\{\s*["']rating["']\s*:\s*(?:"([^"]*)"|'([^']*)'|([^\s,'"{}][^,'"{}]*?))\s*(?:,[^{}]*)?\}""",
    re.IGNORECASE,
)


class NoLabelFound(DataError):
    pass


class OutputUnwritable(RelevancerError):
    pass


def parse_label(response: str, scheme: LabelScheme) -> str:
    """Extract the canonical label from a model response.

    The last rating structure wins. Without one, the response is accepted only if
    exactly one distinct scheme label appears in it as a standalone word.
    """
    matches = list(_RATING_RE.finditer(response))
    if matches:
        m = matches[-1]
        value = next(g for g in m.groups() if g is not None)
        return normalize_label(value, scheme)
    found = [
        label for label in scheme.labels
        if re.search(rf"(?<!\w){re.escape(label)}(?!\w)", response, re.IGNORECASE)
    ]
    if len(found) == 1:
        return found[0]
    if not found:
        raise NoLabelFound("no rating structure or scheme label in response")
    raise NoLabelFound(f"ambiguous response mentions {', '.join(found)}")


TestItem = tuple[QPPair, Optional[str]]


@dataclass
class AnnotationJob:
    test_set: Union[Dataset, Sequence[QPPair], Sequence[TestItem]]
    pool: Optional[Dataset]
    prompt_config: PromptConfig
    llm_config: LlmConfig
    concurrency: int = 1
    output_path: Optional[Path] = None
    config_id: Optional[str] = None
    keep_prompts: bool = False

    def __post_init__(self):
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        scheme = self.prompt_config.scheme
        if isinstance(self.test_set, Dataset) and self.test_set.scheme.labels != scheme.labels:
            raise ConfigError("test set scheme differs from the prompt scheme")
        if self.pool is not None and self.pool.scheme.labels != scheme.labels:
            raise ConfigError("pool scheme differs from the prompt scheme")
        if self.config_id is None:
            self.config_id = f"{self.llm_config.label} + {self.prompt_config.name}"

    def items(self) -> list[TestItem]:
        if isinstance(self.test_set, Dataset):
            return [(ex.pair, ex.label) for ex in self.test_set.examples]
        out = []
        for item in self.test_set:
            out.append((item, None) if isinstance(item, QPPair) else (item[0], item[1]))
        return out


@dataclass
class RunSummary:
    n: int = 0
    error_count: int = 0
    backend_failures: int = 0
    backend_calls: int = 0
    cache_hits: int = 0
    wall_clock_s: float = 0.0
    latency_total_ms: float = 0.0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    token_counts_known: bool = True

    @property
    def mean_latency_ms(self) -> float:
        return self.latency_total_ms / self.n if self.n else 0.0

    @property
    def seconds_per_record(self) -> float:
        return self.wall_clock_s / self.n if self.n else 0.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "error_count": self.error_count,
            "backend_failures": self.backend_failures,
            "backend_calls": self.backend_calls,
            "cache_hits": self.cache_hits,
            "wall_clock_s": self.wall_clock_s,
            "mean_latency_ms": self.mean_latency_ms,
            "prompt_tokens": self.prompt_tokens if self.token_counts_known else None,
            "completion_tokens": self.completion_tokens if self.token_counts_known else None,
        }


@dataclass
class _Outcome:
    prediction: Prediction
    cached: bool = False
    token_counts: Optional[tuple[int, int]] = None
    called: bool = False


@dataclass
class Annotator:
    """Everything label_pair needs besides the pair: job, store, cache, backend."""

    job: AnnotationJob
    store: Optional[Store]
    cache: Cache
    backend: Backend
    embedder: Optional[Embedder] = None
    sleep: Callable[[float], None] = field(default=time.sleep)

    def __post_init__(self):
        if self.embedder is None and self.store is not None and self.store.embedder is not None:
            self.embedder = Embedder(self.store.embedder)

    def run(self, pair: QPPair, gold: Optional[str] = None) -> _Outcome:
        job = self.job
        cfg = job.prompt_config
        demos = select_demos(cfg, pair, job.pool, self.store, embedder=self.embedder)
        prompt = assemble(cfg, pair, [ex for _, ex in demos], [i for i, _ in demos], job.config_id)

        def failed(error: str, raw: str = "", latency: float = 0.0) -> Prediction:
            return Prediction(pair, gold, None, raw, job.config_id, latency, parse_error=error,
                              prompt_hash=prompt.hash, prompt=prompt.text if job.keep_prompts else None)

        try:
            rec = complete(prompt.text, job.llm_config, self.cache, self.backend, sleep=self.sleep)
        except (BackendUnavailable, BackendRejected, UnknownPair) as exc:
            log.warning("%s failed for %r: %s", job.config_id, pair.render(), exc)
            return _Outcome(failed(type(exc).__name__), called=True)
        latency = rec.backend_latency_ms
        try:
            label = parse_label(rec.response, cfg.scheme)
        except (NoLabelFound, UnknownLabel) as exc:
            pred = failed(type(exc).__name__, rec.response, latency)
        else:
            pred = Prediction(pair, gold, label, rec.response, job.config_id, latency,
                              prompt_hash=prompt.hash,
                              prompt=prompt.text if job.keep_prompts else None)
        return _Outcome(pred, rec.cached, rec.token_counts, called=not rec.cached)


def label_pair(pair: QPPair, job: AnnotationJob, store: Optional[Store], cache: Cache,
               backend: Backend, gold: Optional[str] = None, **kwargs) -> Prediction:
    return Annotator(job, store, cache, backend, **kwargs).run(pair, gold).prediction


def label_batch(job: AnnotationJob, store: Optional[Store], cache: Cache, backend: Backend,
                clock: Callable[[], float] = time.perf_counter,
                **kwargs) -> tuple[list[Prediction], RunSummary]:
    """Label every test pair with at most ``job.concurrency`` backend calls in flight.

    Predictions are written to ``job.output_path`` (one JSON object per line) as soon as
    every earlier pair is done, so the file always holds an input-order prefix.
    ``clock`` supplies the wall-clock readings for the summary.
    """
    annotator = Annotator(job, store, cache, backend, **kwargs)
    items = job.items()
    summary = RunSummary(n=len(items))
    out = None
    if job.output_path is not None:
        try:
            Path(job.output_path).parent.mkdir(parents=True, exist_ok=True)
            out = open(job.output_path, "w", encoding="utf-8")
        except OSError as exc:
            raise OutputUnwritable(f"cannot write {job.output_path}: {exc}") from exc
    predictions: list[Prediction] = []
    start = clock()
    pool = ThreadPoolExecutor(max_workers=job.concurrency, thread_name_prefix="label")
    try:
        futures = [pool.submit(annotator.run, pair, gold) for pair, gold in items]
        for fut in futures:
            outcome = fut.result()
            pred = outcome.prediction
            predictions.append(pred)
            if out is not None:
                out.write(json.dumps(pred.to_json(), ensure_ascii=False) + "\n")
                out.flush()
            if pred.parse_error is not None:
                summary.error_count += 1
                if pred.parse_error in ("BackendUnavailable", "BackendRejected"):
                    summary.backend_failures += 1
            if outcome.called:
                summary.backend_calls += 1
            if outcome.cached:
                summary.cache_hits += 1
            summary.latency_total_ms += pred.latency_ms
            if outcome.token_counts is None:
                if pred.raw_response or outcome.called:
                    summary.token_counts_known = False
            else:
                summary.prompt_tokens += outcome.token_counts[0]
                summary.completion_tokens += outcome.token_counts[1]
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
        if out is not None:
            out.close()
    summary.wall_clock_s = clock() - start
    return predictions, summary


def read_predictions(path: str | Path) -> list[Prediction]:
    preds = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                preds.append(Prediction.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction record: {exc}") from None
    return preds
