from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from attackqa.cli import main
from attackqa.config import ConfigError, load_config

from conftest import FIXTURES


def write_config(tmp_path: Path, **extra) -> Path:
    config = {
        "bundle": str(FIXTURES / "bundle.json"),
        "workdir": str(tmp_path / "work"),
        "parameters": {
            "k": 5,
            "qc_threshold": 0.7,
            "split_seed": 7,
            "eval_fraction": 0.1,
            "n_neg": 7,
            "refusal_ratio": 0.125,
            "recall_ks": [1, 5, 10],
        },
        "endpoints": {
            "generator": {"base_url": "mock", "model": "mock-gen", "backoff_base": 0.0},
            "grader": {"base_url": "mock", "model": "mock-grader", "backoff_base": 0.0},
            "judge": {"base_url": "mock", "model": "mock-judge", "backoff_base": 0.0},
            "embedder": {
                "base_url": "mock",
                "model": "mock-emb",
                "dimension": 32,
                "mock_oracle": True,
                "backoff_base": 0.0,
            },
        },
    }
    config.update(extra)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


@pytest.fixture()
def runner():
    return CliRunner()


class TestStageGuards:
    def test_ingest_happy_path(self, tmp_path, runner):
        config = write_config(tmp_path)
        result = runner.invoke(main, ["ingest", "--config", str(config)])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "work" / "tables" / "techniques.jsonl").exists()

    def test_eval_before_index_exits_2_naming_artifact(self, tmp_path, runner):
        config = write_config(tmp_path)
        (tmp_path / "work").mkdir()
        (tmp_path / "work" / "eval.jsonl").write_text("", encoding="utf-8")
        result = runner.invoke(main, ["eval", "--config", str(config)])
        assert result.exit_code == 2
        assert "manifest.json" in result.output

    def test_build_corpus_before_ingest_exits_2(self, tmp_path, runner):
        config = write_config(tmp_path)
        result = runner.invoke(main, ["build-corpus", "--config", str(config)])
        assert result.exit_code == 2
        assert "tables" in result.output

    def test_config_validation_failure_exits_1_with_field_path(self, tmp_path, runner):
        config = write_config(tmp_path)
        data = yaml.safe_load(config.read_text())
        data["parameters"]["eval_fraction"] = 3.0
        config.write_text(yaml.safe_dump(data), encoding="utf-8")
        result = runner.invoke(main, ["ingest", "--config", str(config)])
        assert result.exit_code == 1
        assert "parameters.eval_fraction" in result.output

    def test_missing_input_configuration_exits_1(self, tmp_path, runner):
        config = write_config(tmp_path, bundle="")
        result = runner.invoke(main, ["ingest", "--config", str(config)])
        assert result.exit_code == 1
        assert "no input configured" in result.output


class TestConfigPrecedence:
    def test_file_value_used(self, tmp_path):
        config = write_config(tmp_path)
        assert load_config(config, env={}).k == 5

    def test_env_overrides_file(self, tmp_path):
        config = write_config(tmp_path)
        loaded = load_config(config, env={"FORGE_K": "9"})
        assert loaded.k == 9

    def test_flag_overrides_env_and_file(self, tmp_path):
        config = write_config(tmp_path)
        loaded = load_config(config, env={"FORGE_K": "9"}, overrides={"k": 3})
        assert loaded.k == 3

    def test_endpoint_precedence(self, tmp_path):
        config = write_config(tmp_path)
        env = {"FORGE_GENERATOR_BASE_URL": "https://env.example/v1"}
        loaded = load_config(config, env=env)
        assert loaded.endpoints["generator"].base_url == "https://env.example/v1"
        flagged = load_config(
            config, env=env, overrides={"generator.base_url": "https://flag.example/v1"}
        )
        assert flagged.endpoints["generator"].base_url == "https://flag.example/v1"

    def test_unknown_parameter_rejected_with_path(self, tmp_path):
        config = write_config(tmp_path)
        data = yaml.safe_load(config.read_text())
        data["parameters"]["typo"] = 1
        config.write_text(yaml.safe_dump(data), encoding="utf-8")
        with pytest.raises(ConfigError, match="parameters.typo"):
            load_config(config, env={})

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(tmp_path / "nope.yaml", env={})

    def test_defaults_match_stated_values(self):
        config = load_config(env={})
        assert config.k == 5
        assert config.qc_threshold == 0.7
        assert config.eval_fraction == 0.10
        assert config.refusal_ratio == 0.125
        assert config.recall_ks == [1, 5, 10]
        assert config.n_neg == 7


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    config = write_config(tmp_path)
    runner = CliRunner()
    stages = [
        "ingest", "build-corpus", "gen-qa", "qc", "split",
        "index", "build-emb-data", "build-gen-data", "eval",
    ]
    for stage in stages:
        result = runner.invoke(main, [stage, "--config", str(config)])
        assert result.exit_code == 0, f"{stage}: {result.output}"
    return tmp_path / "work"


class TestPipelineStages:
    def test_all_artifacts_exist(self, pipeline):
        for name in [
            "tables/manifest.json", "corpus.jsonl", "attackqa_raw.jsonl",
            "generation_report.json", "attackqa.jsonl", "qc_report.json",
            "train.jsonl", "eval.jsonl", "index/manifest.json",
            "embedding_tune.jsonl", "generation_tune.jsonl",
            "eval_records.jsonl", "report.json", "report.md",
        ]:
            assert (pipeline / name).exists(), name

    def test_report_is_well_formed(self, pipeline):
        report = json.loads((pipeline / "report.json").read_text())
        metrics = report["metrics"]
        assert set(metrics) == {
            "context_recall_pct", "answer_parsing_success_pct", "correct_reference_pct",
            "mean_correctness_soft_pct", "mean_correctness_hard_pct",
        }
        assert metrics["context_recall_pct"]["5"] == 100.0

    def test_stage_rerun_is_idempotent(self, pipeline):
        config_dir = pipeline.parent
        before = (pipeline / "corpus.jsonl").read_bytes()
        runner = CliRunner()
        result = runner.invoke(
            main, ["build-corpus", "--config", str(config_dir / "config.yaml")]
        )
        assert result.exit_code == 0
        assert (pipeline / "corpus.jsonl").read_bytes() == before

    def test_eval_k_flag_takes_comma_separated_cutoffs(self, pipeline):
        config = pipeline.parent / "config.yaml"
        runner = CliRunner()
        result = runner.invoke(main, ["eval", "--config", str(config), "--k", "1,3"])
        assert result.exit_code == 0, result.output
        report = json.loads((pipeline / "report.json").read_text())
        assert set(report["metrics"]["context_recall_pct"]) == {"1", "3", "5"}
