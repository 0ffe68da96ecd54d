from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from ehrrag.cli import main as cli_main
from ehrrag.errors import ConfigInvalid
from ehrrag.runner import (Environment, ResultsStore, aggregate_scores,
                           run_experiment, validate_config)

from conftest import oracle_config


def _write_config(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture()
def small_config(synth8_dir, tmp_path):
    payload = oracle_config(synth8_dir, tmp_path / "run",
                            tasks=["imaging", "antibiotics", "diagnosis"],
                            strategies=["rag-20", "full-128000"], dims=256)
    return _write_config(tmp_path / "config.json", payload)


# -- config validation ---------------------------------------------------------


def test_minimal_config_defaults(small_config):
    cfg = validate_config(small_config)
    assert cfg.chunk_window == 128
    assert cfg.chunk_stride == 20
    assert cfg.effective_stride == 20
    assert cfg.tokenizer_id == "rule-v1"


def test_sliding_as_overlap_reading(synth8_dir, tmp_path):
    payload = oracle_config(synth8_dir, tmp_path / "run", ["imaging"], ["rag-20"])
    payload["sliding_as_overlap"] = True
    cfg = validate_config(_write_config(tmp_path / "c.json", payload))
    assert cfg.effective_stride == 108  # window 128 minus overlap 20


def test_unknown_strategy_rejected(synth8_dir, tmp_path):
    payload = oracle_config(synth8_dir, tmp_path / "run", ["imaging"], ["beam-7"])
    with pytest.raises(ConfigInvalid) as exc:
        validate_config(_write_config(tmp_path / "c.json", payload))
    assert any("strategies" in v for v in exc.value.violations)


def test_missing_ccsr_file_rejected(synth8_dir, tmp_path):
    payload = oracle_config(synth8_dir, tmp_path / "run", ["diagnosis"], ["rag-20"])
    payload["ccsr"] = str(tmp_path / "nonexistent.csv")
    with pytest.raises(ConfigInvalid) as exc:
        validate_config(_write_config(tmp_path / "c.json", payload))
    assert any("ccsr" in v for v in exc.value.violations)


def test_all_violations_collected(tmp_path):
    payload = {"corpus": str(tmp_path / "nope.jsonl"), "tasks": ["bogus"],
               "strategies": ["bad-x"], "models": [], "providers": {},
               "out_dir": str(tmp_path / "o")}
    with pytest.raises(ConfigInvalid) as exc:
        validate_config(_write_config(tmp_path / "c.json", payload))
    assert len(exc.value.violations) >= 4


def test_toml_config_accepted(synth8_dir, tmp_path):
    toml_text = f"""
corpus = "{synth8_dir / 'corpus.jsonl'}"
out_dir = "{tmp_path / 'run'}"
truth_dir = "{synth8_dir / 'truth'}"
tasks = ["imaging"]
strategies = ["recent-3000"]

[embedding]
provider = "deterministic-test"
dims = 64

[[models]]
provider = "oracle"
model = "oracle"

[providers.oracle]
type = "oracle"
"""
    path = tmp_path / "config.toml"
    path.write_text(toml_text, encoding="utf-8")
    cfg = validate_config(path)
    assert cfg.tasks[0].value == "imaging"


# -- matrix execution ------------------------------------------------------------


def test_matrix_counts_and_scores(small_config):
    cfg = validate_config(small_config)
    env = Environment(cfg)
    summary = run_experiment(cfg, env)
    assert summary["n_cells"] == 8 * 3 * 2  # encounters x tasks x strategies
    assert summary["n_executed"] == summary["n_cells"]
    assert summary["n_failed"] == 0
    store = ResultsStore(cfg.out_dir / "results.jsonl")
    assert len(store.records) == summary["n_cells"]
    assert len({r["run_id"] for r in store.records}) == summary["n_cells"]


def test_full_context_ceiling_small(small_config):
    cfg = validate_config(small_config)
    env = Environment(cfg)
    run_experiment(cfg, env)
    rows = {(r.strategy_kind, r.metric): r.value
            for r in aggregate_scores(cfg, env)
            if r.strategy_kind in ("full", "baseline")}
    assert rows[("full", "f1_mod_date_loc")] == 100.0
    assert rows[("full", "name_f1")] == 100.0
    assert rows[("full", "timespan_jaccard")] == 1.0
    assert rows[("full", "f1_filtered")] == 100.0
    # structured baseline strictly below the oracle ceiling
    assert rows[("baseline", "timespan_jaccard")] < 1.0


def test_rerun_is_all_skips_and_zero_calls(small_config):
    cfg = validate_config(small_config)
    run_experiment(cfg, Environment(cfg))
    env2 = Environment(cfg)
    summary = run_experiment(cfg, env2)
    assert summary["n_executed"] == 0
    assert summary["n_skipped"] == summary["n_cells"]
    assert summary["provider_calls"] == 0


def test_partial_resume_completes_remaining(small_config):
    cfg = validate_config(small_config)
    env = Environment(cfg)
    summary = run_experiment(cfg, env)
    store_path = cfg.out_dir / "results.jsonl"
    lines = store_path.read_text(encoding="utf-8").splitlines()
    keep = len(lines) // 3
    store_path.write_text("\n".join(lines[:keep]) + "\n", encoding="utf-8")
    resumed = run_experiment(cfg, Environment(cfg))
    assert resumed["n_skipped"] == keep
    assert resumed["n_executed"] == summary["n_cells"] - keep
    assert len(ResultsStore(store_path).records) == summary["n_cells"]


def test_context_length_exceeded_recorded(synth8_dir, tmp_path):
    payload = oracle_config(synth8_dir, tmp_path / "run", ["imaging"],
                            ["full-128000"], dims=64)
    payload["models"] = [{"provider": "oracle", "model": "oracle", "window": 500}]
    cfg = validate_config(_write_config(tmp_path / "c.json", payload))
    summary = run_experiment(cfg, Environment(cfg))
    store = ResultsStore(cfg.out_dir / "results.jsonl")
    assert summary["n_failed"] == len(store.records)
    for record in store.records:
        assert record["flags"] == ["context_length_exceeded"]
        level_counts = record["scores"]["mod_date_loc"]
        assert level_counts[0] == 0 and level_counts[2] > 0  # scored zero


def test_store_compaction(small_config):
    cfg = validate_config(small_config)
    run_experiment(cfg, Environment(cfg))
    store = ResultsStore(cfg.out_dir / "results.jsonl")
    n = store.compact()
    again = ResultsStore(cfg.out_dir / "results.jsonl")
    assert len(again.records) == n
    assert [r["run_id"] for r in again.records] == sorted(r["run_id"]
                                                          for r in again.records)


def test_workers_parallel_same_store(synth8_dir, tmp_path):
    base = oracle_config(synth8_dir, tmp_path / "run1", ["imaging"],
                         ["recent-3000", "full-128000"], dims=64)
    cfg1 = validate_config(_write_config(tmp_path / "c1.json", base))
    run_experiment(cfg1, Environment(cfg1))
    parallel = dict(base, out_dir=str(tmp_path / "run2"), workers=4)
    cfg2 = validate_config(_write_config(tmp_path / "c2.json", parallel))
    run_experiment(cfg2, Environment(cfg2))
    a = (cfg1.out_dir / "results.jsonl").read_text(encoding="utf-8")
    b = (cfg2.out_dir / "results.jsonl").read_text(encoding="utf-8")
    strip = lambda text: [
        {k: v for k, v in json.loads(line).items() if k != "timing"}
        for line in text.splitlines()]
    assert strip(a) == strip(b)


# -- CLI ---------------------------------------------------------------------------


def test_cli_pipeline(tmp_path):
    runner = CliRunner()
    out = tmp_path / "synth"
    result = runner.invoke(cli_main, ["synth", "-n", "3", "--seed", "5",
                                      "-o", str(out)])
    assert result.exit_code == 0, result.output

    result = runner.invoke(cli_main, ["ingest", str(out / "corpus.jsonl")])
    assert result.exit_code == 0, result.output
    assert "encounters: 3" in result.output

    payload = oracle_config(out, tmp_path / "run", ["imaging"],
                            ["rag-20", "recent-3000"], dims=128)
    config_path = _write_config(tmp_path / "config.json", payload)

    for verb in ("index", "gold", "run", "score", "report"):
        result = runner.invoke(cli_main, [verb, str(config_path)])
        assert result.exit_code == 0, f"{verb}: {result.output}"

    assert (tmp_path / "run" / "gold.json").exists()
    assert (tmp_path / "run" / "results.jsonl").exists()
    assert (tmp_path / "run" / "scores.json").exists()
    assert (tmp_path / "run" / "report" / "scores.csv").exists()

    result = runner.invoke(cli_main, ["compact", str(config_path)])
    assert result.exit_code == 0

    result = runner.invoke(cli_main, ["replay-paper-tables"])
    assert result.exit_code == 0, result.output
    assert "24/24 rows within tolerance" in result.output


def test_cli_config_error_exit_code(tmp_path):
    bad = _write_config(tmp_path / "bad.json", {"tasks": []})
    runner = CliRunner()
    result = runner.invoke(cli_main, ["run", str(bad)])
    assert result.exit_code == 1
