"""Experiment grids: expansion into named configurations, resumable execution, reports."""

from __future__ import annotations

import csv
import json
import logging
import re
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from relevancer.annotate import AnnotationJob, RunSummary, label_batch
from relevancer.core import ConfigError, LabelScheme, load_scheme
from relevancer.dataset import ColumnMapping, Dataset, exclude_overlap, load
from relevancer.embed import Embedder, EmbedderSpec
from relevancer.evaluate import MetricsReport, metrics_columns, metrics_row, score
from relevancer.llmclient import Backend, Cache, LlmConfig, make_backend
from relevancer.promptkit import STRATEGIES, PromptConfig, parse_name
from relevancer.vectorstore import Store, build_store

log = logging.getLogger(__name__)

GRID_LAMBDAS = (0.75, 0.5, 0.25, 0.0)
TIMING_COLUMNS = ["wall_clock_s", "seconds_per_record", "prompt_tokens", "completion_tokens",
                  "cost_estimate", "backend_failures"]


class DuplicateConfig(ConfigError):
    pass


@dataclass(frozen=True)
class StrategyTemplate:
    strategy: str
    ks: tuple[int, ...] = (0,)
    lambdas: tuple[float, ...] = ()
    cot: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "rag_mmr_fs" and not self.lambdas:
            raise ConfigError("rag_mmr_fs needs at least one lambda")
        if self.strategy != "rag_mmr_fs" and self.lambdas:
            raise ConfigError(f"{self.strategy} takes no lambda")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StrategyTemplate":
        data = dict(data)
        strategy = data.pop("strategy", None)
        if strategy is None:
            raise ConfigError("strategy entry needs a 'strategy' field")
        k = data.pop("k", 0 if strategy == "zero_shot" else None)
        if k is None:
            raise ConfigError(f"{strategy} needs k")
        lam = data.pop("lambda", data.pop("lambdas", ()))
        cot = bool(data.pop("cot", False))
        if data:
            raise ConfigError(f"unknown strategy keys: {sorted(data)}")
        ks = tuple(k) if isinstance(k, (list, tuple)) else (int(k),)
        lams = tuple(float(x) for x in lam) if isinstance(lam, (list, tuple)) else (float(lam),)
        return cls(strategy, ks, lams, cot)


def full_strategies() -> list[StrategyTemplate]:
    """The 17-row reference grid per model: vanilla, 8/16 random and retrieved shots, their COT
    variants, and MMR at four lambdas for both k, in report row order."""
    return [
        StrategyTemplate("zero_shot", (0,)),
        StrategyTemplate("random_fs", (8, 16)),
        StrategyTemplate("rag_fs", (8, 16)),
        StrategyTemplate("random_fs", (8, 16), cot=True),
        StrategyTemplate("rag_fs", (8, 16), cot=True),
        StrategyTemplate("rag_mmr_fs", (8,), GRID_LAMBDAS),
        StrategyTemplate("rag_mmr_fs", (16,), GRID_LAMBDAS),
    ]


@dataclass
class ExperimentGrid:
    models: list[LlmConfig]
    strategies: list[StrategyTemplate]
    scheme: LabelScheme
    test_path: Optional[Path] = None
    pool_path: Optional[Path] = None
    embedder: EmbedderSpec = field(default_factory=EmbedderSpec)
    cache_dir: Optional[Path] = None
    out_dir: Optional[Path] = None
    concurrency: int = 1
    seed: int = 0
    mmr_pool: Optional[int] = None
    keep_prompts: bool = False
    exclude_test_from_pool: bool = True
    columns: ColumnMapping = field(default_factory=ColumnMapping)
    prices: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> "ExperimentGrid":
        base = Path(base_dir) if base_dir else Path(".")

        def path(value):
            if value is None:
                return None
            p = Path(value)
            return p if p.is_absolute() else base / p

        data = dict(data)
        scheme_ref = data.pop("scheme", None)
        if scheme_ref is None:
            raise ConfigError("grid config needs 'scheme'")
        scheme_path = path(scheme_ref)
        scheme = load_scheme(scheme_ref if not scheme_path.exists() else scheme_path)
        models = []
        for m in data.pop("models", []):
            m = dict(m)
            try:
                models.append(LlmConfig(**m))
            except TypeError as exc:
                raise ConfigError(f"bad model entry {m}: {exc}") from None
        raw_strats = data.pop("strategies", None)
        preset = data.pop("preset", None)
        if preset == "full":
            strategies = full_strategies()
        elif preset is not None:
            raise ConfigError(f"unknown preset {preset!r}")
        else:
            strategies = []
        strategies += [StrategyTemplate.from_dict(s) for s in raw_strats or []]
        emb = data.pop("embedder", {})
        columns = data.pop("columns", None)
        grid = cls(
            models=models,
            strategies=strategies,
            scheme=scheme,
            test_path=path(data.pop("test", None)),
            pool_path=path(data.pop("pool", None)),
            embedder=EmbedderSpec(**emb),
            cache_dir=path(data.pop("cache_dir", None)),
            out_dir=path(data.pop("out_dir", None)),
            concurrency=int(data.pop("concurrency", 1)),
            seed=int(data.pop("seed", 0)),
            mmr_pool=data.pop("mmr_pool", None),
            keep_prompts=bool(data.pop("keep_prompts", False)),
            exclude_test_from_pool=bool(data.pop("exclude_test_from_pool", True)),
            columns=ColumnMapping(**columns) if columns else ColumnMapping(),
            prices=data.pop("prices", {}),
        )
        if data:
            raise ConfigError(f"unknown grid keys: {sorted(data)}")
        return grid

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentGrid":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"grid config {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, path.parent)


@dataclass(frozen=True)
class GridEntry:
    config_id: str
    prompt: PromptConfig
    llm: LlmConfig


def expand_grid(grid: ExperimentGrid) -> list[GridEntry]:
    entries: list[GridEntry] = []
    seen: set[str] = set()
    for llm in grid.models:
        for tpl in grid.strategies:
            for k in tpl.ks:
                for lam in tpl.lambdas or (None,):
                    prompt = PromptConfig(tpl.strategy, grid.scheme, k, lam=lam, cot=tpl.cot,
                                          seed=grid.seed, pool_size=grid.mmr_pool)
                    config_id = f"{llm.label} + {prompt.name}"
                    if config_id in seen:
                        raise DuplicateConfig(f"configuration {config_id!r} appears twice")
                    seen.add(config_id)
                    entries.append(GridEntry(config_id, prompt, llm))
    return entries


def parse_config_id(config_id: str, scheme: LabelScheme, seed: int = 0) -> tuple[str, PromptConfig]:
    model, sep, name = config_id.rpartition(" + ")
    if not sep or not model:
        raise ConfigError(f"config id {config_id!r} is not '<MODEL> + <NAME>'")
    return model, parse_name(name, scheme, seed)


@dataclass
class ResultRow:
    config_id: str
    metrics: MetricsReport
    wall_clock_s: float
    seconds_per_record: float
    token_totals: Optional[tuple[int, int]] = None
    cost_estimate: Optional[float] = None
    backend_failures: int = 0
    summary: Optional[RunSummary] = field(default=None, compare=False)

    def extras(self) -> dict[str, object]:
        return {
            "wall_clock_s": f"{self.wall_clock_s:.3f}",
            "seconds_per_record": f"{self.seconds_per_record:.4f}",
            "prompt_tokens": self.token_totals[0] if self.token_totals else "",
            "completion_tokens": self.token_totals[1] if self.token_totals else "",
            "cost_estimate": f"{self.cost_estimate:.6f}" if self.cost_estimate is not None else "",
            "backend_failures": self.backend_failures,
        }


def slug(config_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", config_id).strip("_")


def estimate_cost(tokens: Optional[tuple[int, int]], price: Optional[Mapping[str, float]]) -> Optional[float]:
    if tokens is None or not price:
        return None
    return (tokens[0] / 1000.0 * float(price.get("prompt_per_1k", 0.0))
            + tokens[1] / 1000.0 * float(price.get("completion_per_1k", 0.0)))


BackendFactory = Callable[[LlmConfig, LabelScheme, Mapping], Backend]


def _default_factory(llm: LlmConfig, scheme: LabelScheme, gold: Mapping) -> Backend:
    return make_backend(llm, scheme, gold)


@dataclass
class _Prepared:
    test: Dataset
    pool: Optional[Dataset]
    store: Optional[Store]


def prepare(grid: ExperimentGrid, entries: Sequence[GridEntry]) -> _Prepared:
    """Load data and build the store; every data error surfaces here, before any backend call."""
    if grid.test_path is None:
        raise ConfigError("grid config needs 'test'")
    test = load(grid.test_path, grid.scheme, grid.columns)
    needs_pool = any(e.prompt.strategy != "zero_shot" for e in entries)
    pool = None
    store = None
    if needs_pool:
        if grid.pool_path is None:
            raise ConfigError("few-shot strategies need 'pool'")
        pool = load(grid.pool_path, grid.scheme, grid.columns)
        if grid.exclude_test_from_pool:
            pool = exclude_overlap(pool, test)
        if any(e.prompt.cot for e in entries):
            missing = sum(1 for ex in pool.examples if not ex.rationale)
            if missing == len(pool.examples):
                raise ConfigError("COT configurations need a pool with a rationale column")
        if any(e.prompt.strategy in ("rag_fs", "rag_mmr_fs") for e in entries):
            store = build_store(pool.examples, Embedder(grid.embedder), grid.scheme)
    return _Prepared(test, pool, store)


def _run_sidecar(path: Optional[Path], summary: RunSummary) -> tuple[float, Optional[tuple[int, int]]]:
    """Timing of the run that actually called the backend.

    A run served entirely from cache reuses the stored timing so warm reruns
    reproduce the report byte for byte.
    """
    tokens = (summary.prompt_tokens, summary.completion_tokens) if summary.token_counts_known else None
    if path is None:
        return summary.wall_clock_s, tokens
    if summary.backend_calls == 0 and path.exists():
        stored = json.loads(path.read_text("utf-8"))
        t = stored.get("tokens")
        return float(stored["wall_clock_s"]), (tuple(t) if t else tokens)
    path.write_text(json.dumps({"wall_clock_s": summary.wall_clock_s,
                                "tokens": list(tokens) if tokens else None,
                                "summary": summary.to_dict()}, indent=1), "utf-8")
    return summary.wall_clock_s, tokens


def run_entry(entry: GridEntry, grid: ExperimentGrid, prepared: _Prepared, cache: Cache,
              backend: Backend, **kwargs) -> ResultRow:
    out_dir = grid.out_dir
    preds_path = out_dir / f"{slug(entry.config_id)}.jsonl" if out_dir else None
    job = AnnotationJob(prepared.test, prepared.pool, entry.prompt, entry.llm, grid.concurrency,
                        preds_path, entry.config_id, grid.keep_prompts)
    preds, summary = label_batch(job, prepared.store, cache, backend, **kwargs)
    report = score(preds, grid.scheme)
    sidecar = out_dir / f"{slug(entry.config_id)}.run.json" if out_dir else None
    wall, tokens = _run_sidecar(sidecar, summary)
    n = max(report.n, 1)
    log.info("%s: acc=%.3f f1=%.3f f1w=%.3f (%d calls, %d cached)", entry.config_id, report.accuracy,
             report.macro_f1, report.weighted_f1, summary.backend_calls, summary.cache_hits)
    return ResultRow(entry.config_id, report, wall, wall / n, tokens,
                     estimate_cost(tokens, grid.prices.get(entry.llm.model)),
                     summary.backend_failures, summary)


def run_grid(grid: ExperimentGrid, backend_factory: BackendFactory = _default_factory,
             report_path: str | Path | None = None, only: Sequence[str] = (),
             parallel_configs: bool = False, **kwargs) -> list[ResultRow]:
    entries = expand_grid(grid)
    if only:
        wanted = set(only)
        unknown = wanted - {e.config_id for e in entries}
        if unknown:
            raise ConfigError(f"unknown config ids: {sorted(unknown)}")
        entries = [e for e in entries if e.config_id in wanted]
    prepared = prepare(grid, entries)
    if grid.out_dir is not None:
        grid.out_dir.mkdir(parents=True, exist_ok=True)
    cache = Cache(grid.cache_dir)
    gold = prepared.test.gold_map()
    backends: dict[LlmConfig, Backend] = {}
    lock = threading.Lock()

    def backend_for(llm: LlmConfig) -> Backend:
        with lock:
            if llm not in backends:
                backends[llm] = backend_factory(llm, grid.scheme, gold)
            return backends[llm]

    results: dict[str, ResultRow] = {}
    if parallel_configs:
        # configs writing the same cache file stay sequential within one group
        groups: dict[object, list[GridEntry]] = {}
        for e in entries:
            groups.setdefault(cache.path_for(e.llm) or e.llm, []).append(e)

        def run_group(group: list[GridEntry]) -> None:
            for e in group:
                results[e.config_id] = run_entry(e, grid, prepared, cache, backend_for(e.llm), **kwargs)

        with ThreadPoolExecutor(max_workers=len(groups) or 1) as ex:
            for fut in [ex.submit(run_group, g) for g in groups.values()]:
                fut.result()
    else:
        for e in entries:
            results[e.config_id] = run_entry(e, grid, prepared, cache, backend_for(e.llm), **kwargs)
    rows = [results[e.config_id] for e in entries]
    if report_path is not None:
        write_report(report_path, rows, grid.scheme)
    return rows


def write_report(path: str | Path, rows: Sequence[ResultRow], scheme: LabelScheme) -> None:
    cols = metrics_columns(scheme) + TIMING_COLUMNS
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            row = metrics_row(r.config_id, r.metrics)
            row.update(r.extras())
            writer.writerow(row)


def with_overrides(grid: ExperimentGrid, **overrides) -> ExperimentGrid:
    """Apply non-None CLI overrides on top of the file values."""
    return replace(grid, **{k: v for k, v in overrides.items() if v is not None})
