"""Command-line entry point: index, label, eval, grid, report, sample.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 backend exhaustion.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

from relevancer.annotate import AnnotationJob, label_batch, read_predictions
from relevancer.core import ConfigError, QPPair, RelevancerError, load_scheme
from relevancer.dataset import (
    ColumnMapping,
    Dataset,
    MissingColumn,
    exclude_overlap,
    load,
    save,
    stratified_sample,
)
from relevancer.embed import Embedder, EmbedderSpec, RemoteUnavailable
from relevancer.evaluate import compare, read_table_rows, render_table, score, sort_rows, write_metrics_csv
from relevancer.llmclient import BackendUnavailable, Cache, make_backend
from relevancer.runner import ExperimentGrid, expand_grid, run_grid, with_overrides
from relevancer.vectorstore import Store, build_store

log = logging.getLogger("relevancer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _columns(path: str | None) -> ColumnMapping:
    return ColumnMapping.from_file(path) if path else ColumnMapping()


def cmd_index(args) -> int:
    scheme = load_scheme(args.scheme)
    pool = load(args.pool, scheme, _columns(args.columns))
    spec = EmbedderSpec(args.embedder, args.dim, args.endpoint, args.model)
    store = build_store(pool.examples, Embedder(spec), scheme)
    store.save(args.out)
    print(f"indexed {len(store)} examples (dim {spec.dim}) -> {args.out}")
    return EXIT_OK


def _load_test(path: str, scheme, columns: ColumnMapping):
    try:
        return load(path, scheme, columns)
    except MissingColumn:
        # unlabeled test set: query and title only
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh, delimiter=columns.delimiter)
            if columns.query_col not in (reader.fieldnames or []) or columns.title_col not in (reader.fieldnames or []):
                raise
            return [QPPair(r[columns.query_col], r[columns.title_col]) for r in reader]


def cmd_label(args) -> int:
    grid = ExperimentGrid.from_file(args.config)
    grid = with_overrides(grid, concurrency=args.concurrency,
                          cache_dir=Path(args.cache_dir) if args.cache_dir else None)
    entries = {e.config_id: e for e in expand_grid(grid)}
    if args.only not in entries:
        raise ConfigError(f"{args.only!r} is not in the grid; known: {', '.join(entries)}")
    entry = entries[args.only]
    store = Store.load(args.store)
    if store.scheme is not None and store.scheme.labels != grid.scheme.labels:
        raise ConfigError("store scheme differs from the grid scheme")
    pool = Dataset(grid.scheme, tuple(store.examples()), "store")
    test = _load_test(args.test, grid.scheme, grid.columns)
    gold = test.gold_map() if isinstance(test, Dataset) else {}
    backend = make_backend(entry.llm, grid.scheme, gold)
    job = AnnotationJob(test, pool, entry.prompt, entry.llm, grid.concurrency, Path(args.out),
                        entry.config_id, args.keep_prompts or grid.keep_prompts)
    preds, summary = label_batch(job, store.freeze(), Cache(grid.cache_dir), backend)
    s = summary.to_dict()
    print(f"{entry.config_id}: {s['n']} predictions, {s['error_count']} errors, "
          f"{s['backend_calls']} backend calls, {s['cache_hits']} cached, "
          f"{summary.wall_clock_s:.2f}s wall, {summary.mean_latency_ms:.1f} ms mean latency")
    return EXIT_BACKEND if summary.backend_failures else EXIT_OK


def cmd_eval(args) -> int:
    scheme = load_scheme(args.scheme)
    preds = read_predictions(args.preds)
    groups: OrderedDict[str, list] = OrderedDict()
    for p in preds:
        groups.setdefault(p.config_id, []).append(p)
    reports = [(cid, score(ps, scheme)) for cid, ps in groups.items()]
    if args.out:
        write_metrics_csv(args.out, reports, scheme)
    print(render_table(compare(reports), "md"), end="")
    return EXIT_OK


def cmd_grid(args) -> int:
    grid = ExperimentGrid.from_file(args.config)
    grid = with_overrides(
        grid,
        cache_dir=Path(args.cache_dir) if args.cache_dir else None,
        out_dir=Path(args.out_dir) if args.out_dir else None,
        concurrency=args.concurrency,
        keep_prompts=True if args.keep_prompts else None,
    )
    if grid.out_dir is None:
        grid.out_dir = Path(args.report).parent / "runs"
    rows = run_grid(grid, report_path=args.report, only=args.only or (),
                    parallel_configs=args.parallel_configs)
    print(render_table(compare([(r.config_id, r.metrics) for r in rows]), "md"), end="")
    return EXIT_BACKEND if any(r.backend_failures for r in rows) else EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(read_table_rows(path))
    print(render_table(sort_rows(rows, args.sort, not args.ascending), args.format), end="")
    return EXIT_OK


def cmd_sample(args) -> int:
    scheme = load_scheme(args.scheme)
    ds = load(args.input, scheme, _columns(args.columns))
    for other in args.exclude or ():
        ds = exclude_overlap(ds, load(other, scheme, _columns(args.columns)))
    sample = stratified_sample(ds, args.total, args.seed)
    save(sample, args.out)
    print(f"sampled {len(sample)} examples -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relevancer", description="LLM query-product relevance labeling pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("index", help="embed a labeled pool into a vector store file")
    s.add_argument("--pool", required=True)
    s.add_argument("--scheme", required=True, help="esci | wands | five_level | path to scheme TOML")
    s.add_argument("--embedder", choices=["hash", "remote"], default="hash")
    s.add_argument("--dim", type=int, default=256)
    s.add_argument("--endpoint")
    s.add_argument("--model")
    s.add_argument("--columns", help="column-mapping TOML")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("label", help="label a test set with one grid configuration")
    s.add_argument("--test", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--only", required=True, help="config id, e.g. 'LLM2 + 16_FS_RAG_MMR_0.25'")
    s.add_argument("--out", required=True)
    s.add_argument("--cache-dir")
    s.add_argument("--concurrency", type=int)
    s.add_argument("--keep-prompts", action="store_true")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("eval", help="score a predictions file")
    s.add_argument("--preds", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grid", help="run a full experiment grid")
    s.add_argument("--config", required=True)
    s.add_argument("--cache-dir")
    s.add_argument("--out-dir")
    s.add_argument("--report", required=True)
    s.add_argument("--concurrency", type=int)
    s.add_argument("--only", action="append")
    s.add_argument("--keep-prompts", action="store_true")
    s.add_argument("--parallel-configs", action="store_true")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("report", help="render report CSVs as a ranked table")
    s.add_argument("--in", dest="inputs", action="append", required=True,
                   help="report CSV; repeat to merge, e.g. externally supplied baseline rows")
    s.add_argument("--sort", default="weighted_f1", choices=["weighted_f1", "macro_f1", "accuracy", "config_id"])
    s.add_argument("--ascending", action="store_true")
    s.add_argument("--format", default="md", choices=["md", "csv", "latex"])
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("sample", help="stratified sample with an equal count per class")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--total", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--exclude", action="append", help="drop pairs that occur in this CSV")
    s.add_argument("--columns")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendUnavailable, RemoteUnavailable) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (RelevancerError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
