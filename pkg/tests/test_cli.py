import json
import math

import pytest

from cli import build_parser, load_settings, main
from planning.correction import CorrectionConfig, CorrectionMode
from planning.rollout import TokenReplayPolicy, rollout
from scenario_store import save_scenario
from settings_manager import PipelineSettings, SettingsManager, apply_overrides
from simulation.engine import SimConfig
from simulation.scene import tokenize_scenario
from tokenizer import TokenVocabulary

from .conftest import make_scenario


@pytest.fixture
def config(tmp_path):
    settings = apply_overrides(PipelineSettings(), [
        f"paths.out_dir={tmp_path / 'runs'}",
        f"paths.suite_dir={tmp_path / 'runs' / 'suite'}",
        f"paths.vocab={tmp_path / 'runs' / 'vocab.json'}",
        "suite.counts={\"lead_brake\": 1, \"crossing\": 1}",
        "suite.horizon_tokens=8",
        "vocab.target=8",
        "vocab.tolerance=4",
        "vocab.max_iters=12",
    ])
    path = tmp_path / "settings.json"
    SettingsManager(path).save(settings)
    return path


def _error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


def test_suite_then_vocabulary(config, tmp_path):
    assert main(["suite", "gen", "--config", str(config)]) == 0
    suite_dir = tmp_path / "runs" / "suite"
    assert sorted(p.name for p in suite_dir.glob("*_000.json")) == ["crossing_000.json", "lead_brake_000.json"]
    assert (tmp_path / "runs" / "run.log").exists()

    assert main(["vocab", "build", "--config", str(config)]) == 0
    vocab = TokenVocabulary.load(tmp_path / "runs" / "vocab.json")
    assert 1 <= len(vocab) <= 12


def test_seed_flag_reaches_every_seeded_stage(config):
    args = build_parser().parse_args(["eval", "--config", str(config), "--seed", "9", "--set", "rl.gamma=0.9"])
    settings = load_settings(args)
    assert settings.suite.seed == settings.model.seed == settings.rl.seed == settings.evaluation.seed == 9
    assert settings.rl.gamma == 0.9


def test_missing_inputs_are_reported_as_json(config, tmp_path, capsys):
    assert main(["vocab", "build", "--config", str(config)]) == 1
    payload = _error(capsys)
    assert payload["error"] == "InvalidScenarioError"
    assert "Suite directory not found" in payload["message"]

    assert main(["render", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x.svg"),
                 "--config", str(config)]) == 1
    assert _error(capsys)["error"] == "RecordError"


def test_render_a_records_directory(config, tmp_path, vocab):
    records_dir = tmp_path / "records"
    for name, agents in (("head_on", [(60.0, 0.0, math.pi, 8.0)]), ("empty", [])):
        scenario = make_scenario(agents=agents, horizon=4, name=name)
        save_scenario(scenario, tmp_path / "runs" / "suite" / f"{name}.json")
        policy = TokenReplayPolicy(vocab, tokenize_scenario(scenario, vocab).expert)
        record = rollout(scenario, policy, None, CorrectionConfig(mode=CorrectionMode.OFF), None, SimConfig(), 0)
        record.save(records_dir / f"{name}.json")

    out_dir = tmp_path / "renders"
    assert main(["render", str(records_dir), "--out", str(out_dir), "--every", "2", "--config", str(config)]) == 0
    assert sorted(p.name for p in out_dir.glob("*.svg")) == ["empty.svg", "head_on.svg"]
    assert all(p.read_text(encoding="utf-8").lstrip().startswith("<?xml") for p in out_dir.glob("*.svg"))


def test_render_an_empty_records_directory(config, tmp_path, capsys):
    (tmp_path / "records").mkdir()
    assert main(["render", str(tmp_path / "records"), "--out", str(tmp_path / "renders"),
                 "--config", str(config)]) == 1
    assert _error(capsys)["error"] == "PlannerError"


def test_settings_errors(tmp_path, capsys):
    assert main(["suite", "gen", "--config", str(tmp_path / "nope.json")]) == 1
    assert _error(capsys)["error"] == "SettingsError"


def test_bad_override_value(config, capsys):
    assert main(["eval", "--config", str(config), "--set", "correction.threshold=2"]) == 1
    payload = _error(capsys)
    assert payload["error"] == "SettingsError"
    assert payload["details"]["key"] == "correction.threshold"


@pytest.mark.parametrize("argv", [[], ["train"], ["eval", "--bogus"], ["render", "--out", "x.svg"]])
def test_usage_errors_exit_with_two(argv):
    assert main(argv) == 2


def test_check_grads_prints_a_summary(config, capsys):
    assert main(["check-grads", "--config", str(config)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] is True
    assert set(summary["max_relative_error"]) >= {"linear", "self_attention"}
