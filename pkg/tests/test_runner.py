import csv

import pytest

from relevancer.core import ConfigError
from relevancer.dataset import save
from relevancer.llmclient import make_backend
from relevancer.runner import (
    DuplicateConfig,
    ExperimentGrid,
    expand_grid,
    parse_config_id,
    run_grid,
)

import oracles
from conftest import FIXTURES, synthetic_dataset

TABLE3_NAMES = (FIXTURES / "table3_row_names.txt").read_text().splitlines()


def grid_from(**overrides):
    data = {"scheme": "wands", "models": [{"model": "m1", "endpoint": "mock:oracle", "name": "LLM1"}],
            "strategies": [{"strategy": "zero_shot"}]}
    data.update(overrides)
    return ExperimentGrid.from_dict(data)


def test_full_preset_matches_reference_row_names():
    models = [{"model": f"model-{i}", "endpoint": "mock:oracle", "name": f"LLM{i}"} for i in range(1, 6)]
    grid = ExperimentGrid.from_dict({"scheme": "wands", "models": models, "preset": "full"})
    ids = [e.config_id for e in expand_grid(grid)]
    assert ids == TABLE3_NAMES
    assert len(ids) == 85 and len(set(ids)) == 85


def test_mmr_lambda_rows():
    grid = grid_from(strategies=[{"strategy": "rag_mmr_fs", "k": [8, 16], "lambda": [0.75, 0.5, 0.25, 0]}])
    assert [e.config_id for e in expand_grid(grid)] == [
        "LLM1 + 8_FS_RAG_MMR_0.75", "LLM1 + 8_FS_RAG_MMR_0.5", "LLM1 + 8_FS_RAG_MMR_0.25", "LLM1 + 8_FS_RAG_MMR_0",
        "LLM1 + 16_FS_RAG_MMR_0.75", "LLM1 + 16_FS_RAG_MMR_0.5", "LLM1 + 16_FS_RAG_MMR_0.25", "LLM1 + 16_FS_RAG_MMR_0",
    ]


def test_vanilla_empty_and_duplicates():
    assert [e.config_id for e in expand_grid(grid_from())] == ["LLM1 + VANILLA"]
    assert expand_grid(grid_from(models=[])) == []
    with pytest.raises(DuplicateConfig):
        expand_grid(grid_from(strategies=[{"strategy": "rag_fs", "k": 8}, {"strategy": "rag_fs", "k": [16, 8]}]))
    with pytest.raises(DuplicateConfig):
        expand_grid(grid_from(models=[{"model": "a", "endpoint": "mock:oracle", "name": "X"},
                                      {"model": "b", "endpoint": "mock:oracle", "name": "X"}]))


def test_config_ids_parse_back():
    grid = grid_from(preset="full", strategies=[])
    for e in expand_grid(grid):
        model, prompt = parse_config_id(e.config_id, grid.scheme)
        assert model == "LLM1" and prompt == e.prompt


def test_bad_grid_configs(tmp_path):
    with pytest.raises(ConfigError):
        grid_from(preset="nope")
    with pytest.raises(ConfigError):
        grid_from(strategies=[{"strategy": "rag_fs"}])
    with pytest.raises(ConfigError):
        grid_from(strategies=[{"strategy": "rag_fs", "k": 8, "lambda": 0.5}])
    with pytest.raises(ConfigError):
        grid_from(extra_key=1)
    with pytest.raises(ConfigError):
        grid_from(models=[{"model": "m", "endpoint": "mock:oracle", "colour": "red"}])
    bad = tmp_path / "g.toml"
    bad.write_text("scheme = \n")
    with pytest.raises(ConfigError):
        ExperimentGrid.from_file(bad)


def write_grid(tmp_path, test_path, pool_path, body, name="grid.toml"):
    path = tmp_path / name
    path.write_text(f'scheme = "wands"\ntest = "{test_path}"\npool = "{pool_path}"\n'
                    f'cache_dir = "cache"\nout_dir = "runs"\nconcurrency = 4\nseed = 3\n' + body)
    return path


TWO_ORACLE = """
[[models]]
model = "mock-oracle"
endpoint = "mock:oracle"
name = "ORACLE"

[[strategies]]
strategy = "zero_shot"

[[strategies]]
strategy = "rag_mmr_fs"
k = 8
lambda = [0.5]
cot = true
"""


def test_two_configs_oracle(tmp_path):
    test = synthetic_dataset(50, split="test")
    pool = synthetic_dataset(80, offset=6000, with_rationale=True)
    save(test, tmp_path / "test.csv")
    save(pool, tmp_path / "pool.csv")
    grid = ExperimentGrid.from_file(write_grid(tmp_path, "test.csv", "pool.csv", TWO_ORACLE))
    rows = run_grid(grid, report_path=tmp_path / "report.csv")
    assert [r.config_id for r in rows] == ["ORACLE + VANILLA", "ORACLE + 8_FS_RAG_MMR_0.5_COT"]
    assert all(r.metrics.accuracy == 1.0 and r.metrics.weighted_f1 == 1.0 for r in rows)
    assert (tmp_path / "runs" / "ORACLE_VANILLA.jsonl").exists()
    with open(tmp_path / "report.csv", newline="") as fh:
        report = list(csv.DictReader(fh))
    assert [r["config_id"] for r in report] == [r.config_id for r in rows]
    assert "seconds_per_record" in report[0] and report[0]["invalid"] == "0"


def test_noisy_accuracy_inside_binomial_interval(tmp_path):
    lo, hi = oracles.binom_central_interval(500, 0.8)
    assert (lo, hi) == (376, 422)
    test = synthetic_dataset(500, split="test")
    save(test, tmp_path / "test.csv")
    grid = grid_from(test=str(tmp_path / "test.csv"),
                     models=[{"model": "noisy", "endpoint": "mock:noisy:0.2:2024", "name": "N"}])
    row, = run_grid(grid)
    assert lo <= round(row.metrics.accuracy * 500) <= hi


class Crash(BaseException):
    pass


def crash_factory(limit):
    state = {"left": limit}

    def factory(llm, scheme, gold):
        inner = make_backend(llm, scheme, gold)

        class Flaky:
            def send(self, prompt, config):
                if state["left"] <= 0:
                    raise Crash()
                state["left"] -= 1
                return inner.send(prompt, config)

        return Flaky()

    return factory


def test_warm_rerun_and_resume(tmp_path):
    test = synthetic_dataset(60, split="test")
    pool = synthetic_dataset(80, offset=6000, with_rationale=True)
    save(test, tmp_path / "test.csv")
    save(pool, tmp_path / "pool.csv")
    fixed_clock = lambda: 0.0  # noqa: E731
    body = TWO_ORACLE.replace('endpoint = "mock:oracle"', 'endpoint = "mock:noisy:0.3:1"')

    clean_dir = tmp_path / "clean"
    clean_dir.mkdir()
    clean = ExperimentGrid.from_file(write_grid(clean_dir, tmp_path / "test.csv", tmp_path / "pool.csv", body))
    run_grid(clean, report_path=clean_dir / "report.csv", clock=fixed_clock)
    first = (clean_dir / "report.csv").read_bytes()
    rows = run_grid(clean, report_path=clean_dir / "report.csv")
    assert sum(r.summary.backend_calls for r in rows) == 0
    assert (clean_dir / "report.csv").read_bytes() == first

    crash_dir = tmp_path / "crash"
    crash_dir.mkdir()
    crashy = ExperimentGrid.from_file(write_grid(crash_dir, tmp_path / "test.csv", tmp_path / "pool.csv", body))
    with pytest.raises(Crash):
        run_grid(crashy, crash_factory(85), report_path=crash_dir / "report.csv", clock=fixed_clock)
    assert not (crash_dir / "report.csv").exists()
    rows = run_grid(crashy, report_path=crash_dir / "report.csv", clock=fixed_clock)
    assert [r.summary.backend_calls for r in rows] == [0, 35]
    assert (crash_dir / "report.csv").read_bytes() == first
    for name in ("ORACLE_VANILLA.jsonl", "ORACLE_8_FS_RAG_MMR_0.5_COT.jsonl"):
        assert (crash_dir / "runs" / name).read_bytes() == (clean_dir / "runs" / name).read_bytes()


def test_parallel_configs_match_sequential(tmp_path):
    test = synthetic_dataset(40, split="test")
    save(test, tmp_path / "test.csv")
    models = [{"model": f"m{i}", "endpoint": "mock:noisy:0.4:9", "name": f"M{i}"} for i in range(3)]
    strategies = [{"strategy": "zero_shot"}, {"strategy": "zero_shot", "cot": True}]
    reports = []
    for parallel in (False, True):
        grid = grid_from(test=str(tmp_path / "test.csv"), models=models, strategies=strategies,
                         cache_dir=str(tmp_path / f"cache{parallel}"), out_dir=str(tmp_path / f"runs{parallel}"))
        rows = run_grid(grid, parallel_configs=parallel, clock=lambda: 0.0,
                        report_path=tmp_path / f"r{parallel}.csv")
        assert len(rows) == 6
        reports.append((tmp_path / f"r{parallel}.csv").read_bytes())
    assert reports[0] == reports[1]


def test_only_and_data_errors_before_backend(tmp_path):
    test = synthetic_dataset(10, split="test")
    save(test, tmp_path / "test.csv")
    grid = grid_from(test=str(tmp_path / "test.csv"), strategies=[{"strategy": "zero_shot"},
                                                                  {"strategy": "random_fs", "k": 8}])
    with pytest.raises(ConfigError):
        run_grid(grid, only=["LLM1 + 99_FS"])
    calls = []

    def factory(llm, scheme, gold):
        calls.append(llm)
        return make_backend(llm, scheme, gold)

    with pytest.raises(ConfigError):  # random_fs without a pool
        run_grid(grid, factory)
    assert calls == []
    rows = run_grid(grid, factory, only=["LLM1 + VANILLA"])
    assert [r.config_id for r in rows] == ["LLM1 + VANILLA"]


def test_cost_estimate_from_price_table(tmp_path):
    test = synthetic_dataset(10, split="test")
    save(test, tmp_path / "test.csv")
    grid = grid_from(test=str(tmp_path / "test.csv"),
                     prices={"m1": {"prompt_per_1k": 1.0, "completion_per_1k": 2.0}})
    row, = run_grid(grid)
    p, c = row.token_totals
    assert row.cost_estimate == pytest.approx(p / 1000 + 2 * c / 1000)
