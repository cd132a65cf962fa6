import math

import numpy as np
import pytest

from evaluation.harness import (
    Checkpoints,
    Evaluator,
    aggregate,
    ablate,
    config_tag,
    evaluate,
    reaggregate,
    resolve_agent_modes,
    time_to_collision,
)
from networks import CollisionCritic, EgoPolicy, ModelError, NetworkDims, WorldModel
from networks.features import POSITION_SCALE, FeatureDims
from planning.correction import CorrectionConfig, CorrectionMode
from simulation.engine import AgentMode
from simulation.record import RolloutMetrics, RolloutRecord
from tokenizer import build_vocabulary, encode
from training.common import read_csv

from .conftest import arc_segment, make_scenario

DIMS = NetworkDims(embed=8, hidden=16, max_trace=6)


@pytest.fixture(scope="module")
def scenarios():
    return [
        make_scenario(agents=[(45.0, 0.0, math.pi, 8.0)], horizon=4, name="head_on"),
        make_scenario(agents=[(40.0, 3.5, 0.0, 6.0)], horizon=4, name="side_by_side"),
    ]


@pytest.fixture(scope="module")
def checkpoints(vocab):
    return Checkpoints(vocab, EgoPolicy(vocab, DIMS, seed=1), WorldModel(vocab, DIMS, seed=2),
                       CollisionCritic(vocab, DIMS, seed=3))


def _record(name, seed, collided, progression, corrections=0.0, collision_step=None, first_flag=None):
    record = RolloutRecord(name, seed, "off", "idm", 0.1, make_scenario().ego_init)
    record.metrics = RolloutMetrics(collided, False, progression, corrections, 0.5, collision_step, first_flag)
    return record


class TestAggregate:
    def test_rates_are_percentages(self):
        records = [_record("a", 0, True, 0.5, 2.0, 3, 1), _record("b", 0, False, 1.0)]
        row = aggregate(records, CorrectionConfig(), "idm")
        assert row.collision_rate == 50.0
        assert row.progression == 75.0
        assert row.avg_correction_tokens == 2.0
        assert row.mean_ttc_first_flag == 2.0
        assert row.rollouts == 2

    def test_order_does_not_matter(self):
        records = [_record("a", 0, True, 0.3), _record("b", 1, False, 0.9), _record("c", 2, False, 0.6)]
        assert aggregate(records, CorrectionConfig(), "idm") == aggregate(records[::-1], CorrectionConfig(), "idm")

    def test_empty_or_incomplete_input(self):
        with pytest.raises(ValueError):
            aggregate([], CorrectionConfig(), "idm")
        record = _record("a", 0, False, 1.0)
        record.metrics = None
        with pytest.raises(ValueError):
            aggregate([record], CorrectionConfig(), "idm")

    def test_time_to_collision_needs_flag_before_collision(self):
        assert time_to_collision(_record("a", 0, True, 0.1, collision_step=6, first_flag=2)) == 4
        assert time_to_collision(_record("a", 0, True, 0.1, collision_step=2, first_flag=6)) is None
        assert time_to_collision(_record("a", 0, False, 0.1, first_flag=2)) is None


def test_agent_mode_names():
    assert resolve_agent_modes("both") == (AgentMode.IDM, AgentMode.LOG_REPLAY)
    with pytest.raises(ValueError):
        resolve_agent_modes("replay")


def test_report_rebuilds_from_stored_records(scenarios, checkpoints, tmp_path):
    cfg = CorrectionConfig(max_len=2)
    report = evaluate(scenarios, checkpoints, cfg, "logreplay", seed=3, records_dir=tmp_path, label="pi")
    (row,) = report.rows
    assert row.rollouts == 2
    stored = tmp_path / "pi" / config_tag(cfg) / "logreplay"
    assert sorted(p.name for p in stored.glob("*.json")) == ["head_on.json", "side_by_side.json"]
    assert reaggregate(stored, cfg, "logreplay", "pi") == row

    report.to_csv(tmp_path / "eval.csv")
    (csv_row,) = read_csv(tmp_path / "eval.csv")
    assert csv_row["label"] == "pi"
    assert float(csv_row["collision_rate"]) == row.collision_rate


def test_evaluation_is_deterministic(scenarios, checkpoints):
    cfg = CorrectionConfig(mode=CorrectionMode.OFF)
    runs = [Evaluator(scenarios, checkpoints, seed=5).run_records(cfg, AgentMode.IDM) for _ in range(2)]
    assert [r.to_dict(include_wall_clock=False) for r in runs[0]] == [
        r.to_dict(include_wall_clock=False) for r in runs[1]
    ]


def test_configurations_share_rollout_seeds(scenarios, checkpoints):
    evaluator = Evaluator(scenarios, checkpoints, seed=5)
    off = evaluator.run_records(CorrectionConfig(mode=CorrectionMode.OFF), AgentMode.LOG_REPLAY)
    full = evaluator.run_records(CorrectionConfig(), AgentMode.LOG_REPLAY)
    assert [r.seed for r in off] == [r.seed for r in full]


def test_ablation_grid_shape(scenarios, checkpoints, tmp_path):
    report = ablate(
        scenarios,
        checkpoints,
        thresholds=[0.5, 0.75, 0.9],
        lengths=[0, 2, 5],
        agent_mode="logreplay",
        policies={"il": EgoPolicy(checkpoints.vocab, DIMS, seed=7)},
        out_csv=tmp_path / "ablation.csv",
    )
    assert len(report.rows) == 3 * 3 + 4 + 2
    grid = report.find(mode="full_trace", label="policy")
    assert sorted((r.threshold, r.max_len) for r in grid) == [(t, c) for t in (0.5, 0.75, 0.9) for c in (0, 2, 5)]
    assert {r.mode for r in report.find(label="policy")} == {m.value for m in CorrectionMode}
    assert len(report.find(label="il")) == 2
    assert len(read_csv(tmp_path / "ablation.csv")) == len(report.rows)


class RankedSpeeds:
    """Proposes 10, 6, 3 then 0 m/s as the correction trace grows; 0.9 of the mass on the pick."""

    ranking = (10.0, 6.0, 3.0, 0.0)

    def __init__(self, vocab):
        self.vocab = vocab
        self.features = FeatureDims()
        self.dims = NetworkDims(max_trace=10)
        self.tokens = [encode(arc_segment(v, 0.0), vocab) for v in self.ranking]

    def propose(self, ctx):
        dist = np.full(len(self.vocab), 0.1 / (len(self.vocab) - 1))
        dist[self.tokens[min(len(ctx.trace), len(self.tokens) - 1)]] = 0.9
        return dist


class SpeedRisk:
    """Risk grows with the proposal's speed: 0.9 at 10 m/s and above."""

    def __init__(self, vocab):
        self.vocab = vocab
        self.features = FeatureDims()

    def collision_prob(self, features):
        last_x = features[self.features.trail_poses * 4 + (self.features.substeps - 1) * 4] * POSITION_SCALE
        speed = last_x / (self.features.substeps * 0.1)
        return min(1.0, speed / 10.0) * 0.9


def test_ablation_trends(straight_vocab):
    leads = [make_scenario(agents=[(x, 0.0, 0.0, 5.0)], horizon=8, name=f"lead_{i}")
             for i, x in enumerate((28.7, 30.7))]
    checkpoints = Checkpoints(straight_vocab, RankedSpeeds(straight_vocab), critic=SpeedRisk(straight_vocab))
    report = ablate(leads, checkpoints, thresholds=[0.0, 0.75], lengths=[0, 1, 2], agent_mode="logreplay")

    def row(threshold, length):
        (found,) = report.find(mode="full_trace", threshold=threshold, max_len=length)
        return found

    collisions = [row(0.75, c).collision_rate for c in (0, 1, 2)]
    assert collisions == [100.0, 0.0, 0.0]
    assert all(a >= b for a, b in zip(collisions, collisions[1:]))
    assert row(0.0, 2).progression < row(0.75, 2).progression
    assert row(0.0, 2).avg_correction_tokens > row(0.75, 2).avg_correction_tokens


class TestTraceCapacity:
    def test_evaluator_rejects_long_budgets(self, scenarios, checkpoints):
        evaluator = Evaluator(scenarios, checkpoints)
        with pytest.raises(ModelError):
            evaluator.run_records(CorrectionConfig(max_len=DIMS.max_trace + 1), AgentMode.LOG_REPLAY)
        with pytest.raises(ModelError):
            evaluator.run_records(CorrectionConfig(budget_range=(0, DIMS.max_trace + 1)), AgentMode.LOG_REPLAY)

    def test_modes_without_a_full_trace_ignore_the_capacity(self, scenarios, checkpoints):
        evaluator = Evaluator(scenarios, checkpoints)
        for mode in (CorrectionMode.OFF, CorrectionMode.LAST_TOKEN_ONLY, CorrectionMode.REJECTION_SAMPLING):
            records = evaluator.run_records(CorrectionConfig(mode=mode, max_len=12), AgentMode.LOG_REPLAY)
            assert len(records) == len(scenarios)

    def test_ablation_fails_before_the_first_rollout(self, scenarios, checkpoints, tmp_path):
        logged = []
        with pytest.raises(ModelError):
            ablate(scenarios, checkpoints, thresholds=[0.75], lengths=[1, DIMS.max_trace + 1],
                   agent_mode="logreplay", out_csv=tmp_path / "ablation.csv", on_log=logged.append)
        assert logged == []
        assert not (tmp_path / "ablation.csv").exists()

    def test_named_policies_are_checked_too(self, scenarios, checkpoints):
        narrow = EgoPolicy(checkpoints.vocab, NetworkDims(embed=8, hidden=16, max_trace=2))
        with pytest.raises(ModelError):
            ablate(scenarios, checkpoints, thresholds=[0.75], lengths=[1], base_cfg=CorrectionConfig(max_len=3),
                   agent_mode="logreplay", policies={"narrow": narrow})


class TestCheckpointChecks:
    def test_mixed_vocabularies_rejected(self, vocab):
        other = build_vocabulary([arc_segment(float(v), 0.0) for v in range(5)], radius=0.25, max_size=16)
        with pytest.raises(ModelError):
            Checkpoints(vocab, EgoPolicy(other, DIMS))

    def test_missing_components(self, scenarios, vocab):
        bare = Checkpoints(vocab, EgoPolicy(vocab, DIMS))
        evaluator = Evaluator(scenarios, bare)
        with pytest.raises(ModelError):
            evaluator.run_records(CorrectionConfig(), AgentMode.IDM)
        with pytest.raises(ModelError):
            evaluator.run_records(CorrectionConfig(mode=CorrectionMode.OFF), AgentMode.WORLD_MODEL)

    def test_load_from_files(self, vocab, checkpoints, tmp_path):
        vocab.save(tmp_path / "vocab.json")
        checkpoints.policy.save(tmp_path / "pi.ckpt")
        checkpoints.critic.save(tmp_path / "qc.ckpt")
        loaded = Checkpoints.load(tmp_path / "vocab.json", tmp_path / "pi.ckpt", critic_path=tmp_path / "qc.ckpt")
        assert loaded.world_model is None
        x = np.zeros(loaded.critic.features.critic_width)
        assert loaded.critic.collision_prob(x) == checkpoints.critic.collision_prob(x)

    def test_no_scenarios(self, checkpoints):
        with pytest.raises(ValueError):
            Evaluator([], checkpoints)
