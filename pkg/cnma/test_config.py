# Tests for library settings, presets and run configuration files

import os
import sys
from pathlib import Path

import orjson
import pytest

# Add the parent directory to the path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cnma.config import (
    DEFAULT_CONFIG,
    CnmaConfig,
    RunConfig,
    get_config_from_env,
    get_preset_config,
    load_run_config,
)
from cnma.errors import ConfigError

DATA = Path(__file__).parent / "data"


def test_defaults_and_overrides():
    config = CnmaConfig()
    assert config.get("n_samples") == DEFAULT_CONFIG["n_samples"]
    config.set("seed", 7)
    config.update({"n_samples": 10})
    assert (config.get("seed"), config.get("n_samples")) == (7, 10)
    assert config.get("missing", "fallback") == "fallback"


def test_rank_tolerance_from_config():
    tolerance = CnmaConfig({"rank_tolerance": 1e-6}).rank_tolerance()
    assert tolerance.relative_threshold == 1e-6
    assert tolerance.fragile_factor == DEFAULT_CONFIG["fragile_factor"]


def test_presets():
    assert get_preset_config("case-study").get("sampling_mode") == "independent"
    assert get_preset_config("precise").get("n_samples") == 1_000_000
    with pytest.raises(ValueError, match="Unknown preset"):
        get_preset_config("fastest")


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("CNMA_RANK_TOL", "1e-9")
    monkeypatch.setenv("CNMA_SAMPLES", "250")
    monkeypatch.setenv("CNMA_SEED", "3")
    monkeypatch.setenv("CNMA_SAMPLING_MODE", "independent")
    monkeypatch.setenv("CNMA_MAX_WORKERS", "2")
    config = get_config_from_env()
    assert config.get("rank_tolerance") == 1e-9
    assert config.get("n_samples") == 250
    assert config.get("seed") == 3
    assert config.get("sampling_mode") == "independent"
    assert config.get("max_workers") == 2


def test_run_config_defaults():
    run_config = RunConfig(data="contrasts.csv")
    assert run_config.model.effects == "common"
    assert run_config.question.set == "all-treatments"
    assert run_config.question.metric == "p-score"
    assert run_config.output.formats == ["json", "csv"]


@pytest.mark.parametrize("payload", [
    {"data": "x.csv", "question": {"metric": "best-guess"}},
    {"data": "x.csv", "question": {"seed": -1}},
    {"data": "x.csv", "question": {"samples": 0}},
    {"data": "x.csv", "output": {"formats": ["pdf"]}},
    {"data": "x.csv", "model": {"interactions": ["A"]}},
    {"data": "x.csv", "model": {"effects": "mixed"}},
    {"model": {}},
])
def test_invalid_run_configs(tmp_path, payload):
    path = tmp_path / "run.json"
    path.write_bytes(orjson.dumps(payload))
    with pytest.raises(ConfigError) as excinfo:
        load_run_config(path)
    assert excinfo.value.exit_code == 2


def test_malformed_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{\"data\": ")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_run_config(path)


def test_data_resolved_relative_to_config():
    run_config = load_run_config(DATA / "cll_novel_agents.json")
    assert Path(run_config.data) == DATA / "cll.csv"
    assert run_config.question.set == ["Duv", "Ibr", "Ide", "Ubl", "Ven"]
    assert run_config.question.mode == "independent"
    assert run_config.output.formats == ["json", "csv", "svg"]


def test_anchored_fixture():
    run_config = load_run_config(DATA / "table1_anchored.json")
    assert run_config.model.anchor == "D"
    assert run_config.question.reference == "D"
