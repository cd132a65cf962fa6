import math

import numpy as np
import pytest

from networks import CollisionCritic, EgoPolicy, ModelError, NetworkDims, WorldModel
from nn.checkpoint import store_digest
from nn.params import adam_update
from planning.correction import CorrectionConfig, CorrectionMode, draw_budget
from planning.rollout import TokenReplayPolicy, rollout
from simulation.engine import SimConfig
from simulation.record import RolloutMetrics, RolloutRecord
from simulation.scene import tokenize_scenario
from tokenizer import encode
from training.common import TrainingDivergedError, check_finite, read_csv
from training.critic_training import CriticConfig, sweep_critic_horizon
from training.dataset import build_imitation_data, split_scenarios
from training.imitation import PretrainConfig, expose_corrections, pretrain, proposal_collides
from training.reinforce import (
    ReinforceTrainer,
    RlBatch,
    RlConfig,
    RlSample,
    collect_rollouts,
    compute_reward,
    credit_terms,
    normalize_rewards,
    reinforce_gradients,
    select_hard_examples,
)

from .conftest import arc_segment, make_scenario

DIMS = NetworkDims(embed=8, hidden=16, max_trace=4)


def _record(collided: bool, progression: float) -> RolloutRecord:
    record = RolloutRecord("s", 0, "off", "logreplay", 0.1, make_scenario().ego_init)
    record.metrics = RolloutMetrics(collided, False, progression, 0.0, 0.0)
    return record


@pytest.fixture(scope="module")
def head_on():
    return make_scenario(agents=[(60.0, 0.0, math.pi, 8.0)], horizon=8)


@pytest.fixture(scope="module")
def data(head_on, vocab):
    return build_imitation_data([head_on], vocab)


class TestReward:
    def test_progression_without_collision(self):
        assert compute_reward(_record(False, 0.6)).reward == pytest.approx(0.6)

    def test_collision_costs_one(self):
        assert compute_reward(_record(True, 0.9)).reward == -1.0

    def test_missing_metrics(self):
        record = _record(False, 0.5)
        record.metrics = None
        with pytest.raises(ValueError):
            compute_reward(record)

    def test_normalization(self):
        normalized = normalize_rewards(np.array([1.0, -1.0, 0.5, 0.5]))
        assert normalized.mean() == pytest.approx(0.0)
        assert normalized.std() == pytest.approx(1.0, rel=1e-6)


def test_credit_goes_to_executed_tokens_only(head_on, vocab):
    class Rejecting:
        features = EgoPolicy(vocab, DIMS).features

        def collision_prob(self, features):
            return 0.9

    policy = TokenReplayPolicy(vocab, tokenize_scenario(head_on, vocab).expert)
    record = rollout(head_on, policy, Rejecting(), CorrectionConfig(max_len=2), None, SimConfig(), 0,
                     keep_contexts=True)
    record.metrics = RolloutMetrics(False, False, 0.5, 0.0, 0.0)
    batch = RlBatch([RlSample(record, compute_reward(record), 2.0, False)])
    terms = credit_terms(batch, gamma=0.5)
    assert len(terms) == len(record.steps)
    assert [tok for _, tok, _ in terms] == [s.executed for s in record.steps]
    assert [w for _, _, w in terms] == pytest.approx([2.0 * 0.5**t for t in range(len(record.steps))])
    assert all(ctx.trace == () for ctx, _, _ in terms)


class TestReinforceGradient:
    def _log_prob(self, policy, ctx, token):
        return math.log(policy.propose(ctx)[token])

    @pytest.mark.parametrize("weight", [1.0, -1.0])
    def test_reward_sign_moves_the_executed_token(self, vocab, data, weight):
        policy = EgoPolicy(vocab, DIMS, seed=3)
        il = policy.frozen()
        ctx = data.ego_steps[0].context
        before = self._log_prob(policy, ctx, 5)
        for _ in range(5):
            grads, _ = reinforce_gradients(policy, il, [(ctx, 5, weight)], kl_weight=0.0)
            adam_update(policy.store, grads, lr=1e-2)
        after = self._log_prob(policy, ctx, 5)
        assert (after - before) * weight > 0

    def test_kl_term_pulls_back_to_the_imitation_policy(self, vocab, data):
        il = EgoPolicy(vocab, DIMS, seed=3)
        policy = il.copy()
        rng = np.random.default_rng(0)
        name = "pi.head.b"
        policy.store.params[name] = policy.store.params[name] + rng.normal(0.0, 1.0, policy.store.params[name].shape)
        terms = [(s.context, 0, 0.0) for s in data.ego_steps]
        _, first = reinforce_gradients(policy, il.frozen(), terms, kl_weight=1.0)
        for _ in range(20):
            grads, _ = reinforce_gradients(policy, il.frozen(), terms, kl_weight=1.0)
            adam_update(policy.store, grads, lr=1e-2)
        _, last = reinforce_gradients(policy, il.frozen(), terms, kl_weight=1.0)
        assert last.mean_kl < first.mean_kl

    def test_no_terms_no_gradient(self, vocab):
        policy = EgoPolicy(vocab, DIMS)
        grads, stats = reinforce_gradients(policy, policy.frozen(), [], 0.1)
        assert grads == {}
        assert stats.terms == 0


def test_rl_stage_keeps_the_world_model_frozen(head_on, vocab, tmp_path):
    policy = EgoPolicy(vocab, DIMS, seed=1)
    wm = WorldModel(vocab, DIMS, seed=2)
    wm_digest, pi_digest = store_digest(wm.store), store_digest(policy.store)
    cfg = RlConfig(epochs=1, rollouts_per_epoch=2, self_correction=False, seed=4)
    rows = ReinforceTrainer(policy, wm, None, [head_on], cfg).run(tmp_path / "rl_loss.csv")
    assert len(rows) == 1
    assert store_digest(wm.store) == wm_digest
    assert store_digest(policy.store) != pi_digest
    assert len(read_csv(tmp_path / "rl_loss.csv")) == 1


def test_self_correcting_rl_needs_a_critic(head_on, vocab):
    trainer = ReinforceTrainer(EgoPolicy(vocab, DIMS), WorldModel(vocab, DIMS), None, [head_on],
                               RlConfig(epochs=1, rollouts_per_epoch=1, budget_range=(0, 3)))
    with pytest.raises(ValueError):
        trainer.run()


def test_trainer_rejects_budgets_beyond_the_trace_capacity(head_on, vocab):
    policy = EgoPolicy(vocab, DIMS)
    with pytest.raises(ModelError) as info:
        ReinforceTrainer(policy, WorldModel(vocab, DIMS), None, [head_on], RlConfig(budget_range=(0, 6)))
    assert info.value.details == {"budget": 6, "max_trace": DIMS.max_trace}
    # without self-correction the policy never sees a trace
    ReinforceTrainer(policy, WorldModel(vocab, DIMS), None, [head_on], RlConfig(self_correction=False))


def test_budget_draws_are_uniform():
    cfg = RlConfig().correction_config()
    rng = np.random.default_rng(0)
    n = 10_000
    draws = np.array([draw_budget(cfg, rng) for _ in range(n)])
    values, counts = np.unique(draws, return_counts=True)
    assert values.tolist() == list(range(7))
    p = 1.0 / 7.0
    sigma = math.sqrt(n * p * (1.0 - p))
    assert np.all(np.abs(counts - n * p) <= 3.0 * sigma)


class TestRolloutCollection:
    @pytest.fixture(scope="class")
    def models(self, straight_vocab):
        return EgoPolicy(straight_vocab, DIMS, seed=1), WorldModel(straight_vocab, DIMS, seed=2)

    def test_replay_only_batch_is_normalized(self, straight_vocab, models):
        policy, wm = models
        scenarios = [make_scenario(horizon=8, name="empty"),
                     make_scenario(agents=[(60.0, 0.0, math.pi, 8.0)], horizon=8, name="head_on")]
        cfg = RlConfig(replay_mix=1.0, self_correction=False)
        batch = collect_rollouts(policy, wm, None, scenarios, cfg, n=12, seed=0)
        assert all(s.replay for s in batch.samples)
        for sample in batch.samples:
            expected = -1.0 if sample.record.scenario_name == "head_on" else 1.0
            assert sample.reward.reward == pytest.approx(expected)
        normalized = np.array([s.normalized for s in batch.samples])
        assert normalized.mean() == pytest.approx(0.0, abs=1e-9)
        assert normalized.std() == pytest.approx(1.0, rel=1e-6)

    def test_replay_rollouts_come_first(self, straight_vocab, models):
        policy, wm = models
        cfg = RlConfig(replay_mix=0.5, self_correction=False)
        batch = collect_rollouts(policy, wm, None, [make_scenario(horizon=4)], cfg, n=4, seed=3)
        assert [s.replay for s in batch.samples] == [True, True, False, False]
        assert all(s.record.contexts for s in batch.samples)
        assert np.mean([s.normalized for s in batch.samples]) == pytest.approx(0.0, abs=1e-9)

    def test_critic_required_for_self_correction(self, straight_vocab, models):
        policy, wm = models
        with pytest.raises(ValueError):
            collect_rollouts(policy, wm, None, [make_scenario()], RlConfig(budget_range=(0, 2)), n=1, seed=0)


class StoppedAgents:
    """World model whose agents hold still."""

    def __init__(self, vocab):
        self.vocab = vocab
        self.stop = encode(arc_segment(0.0, 0.0), vocab)

    def sample_agents_step(self, scene, road_map, dt, temperature, rng):
        return [self.stop] * (scene.num_agents - 1)

    def predicted_states(self, scene, road_map, dt):
        return {j: scene.agents[j] for j in range(1, scene.num_agents)}


@pytest.mark.parametrize("fraction, expected", [(0.0, ["crash_b", "crash_d"]),
                                                (1.0, ["safe_a", "crash_b", "safe_c", "crash_d"])])
def test_hard_examples_keep_suite_order(straight_vocab, fraction, expected):
    scenarios = [
        make_scenario(agents=[(200.0 if name.startswith("safe") else 30.0, 0.0, 0.0, 0.0)], horizon=8, name=name)
        for name in ("safe_a", "crash_b", "safe_c", "crash_d")
    ]
    policy = TokenReplayPolicy(straight_vocab, tokenize_scenario(scenarios[0], straight_vocab).expert)
    kept = select_hard_examples(policy, StoppedAgents(straight_vocab), scenarios, fraction_rest=fraction, seed=0)
    assert [s.name for s in kept] == expected


def test_critic_horizon_sweep_has_one_row_per_k(straight_vocab, tmp_path):
    scenario = make_scenario(agents=[(60.0, 0.0, math.pi, 8.0)], horizon=8, name="head_on")
    policy = TokenReplayPolicy(straight_vocab, tokenize_scenario(scenario, straight_vocab).expert)
    off = CorrectionConfig(mode=CorrectionMode.OFF)
    records = [rollout(scenario, policy, None, off, None, SimConfig(), seed) for seed in range(5)]
    rows = sweep_critic_horizon(records, [1, 3], CriticConfig(epochs=2, batch_size=8),
                                lambda: CollisionCritic(straight_vocab, DIMS), tmp_path / "sweep.csv")
    assert [row["k"] for row in rows] == [1, 3]
    assert 0 < rows[0]["n_pos"] <= rows[1]["n_pos"]
    assert all(0.0 <= row["accuracy"] <= 1.0 for row in rows)
    assert len(read_csv(tmp_path / "sweep.csv")) == 2


def test_rl_config_validation():
    with pytest.raises(ValueError):
        RlConfig(gamma=0.0)
    with pytest.raises(ValueError):
        RlConfig(budget_range=(2, 1))
    assert RlConfig(self_correction=False).correction_config().max_len == 0


class TestCorrectionExposure:
    class OneHot:
        def __init__(self, vocab, token):
            self.vocab, self.token = vocab, token

        def propose(self, ctx):
            dist = np.zeros(len(self.vocab))
            dist[self.token] = 1.0
            return dist

    def test_pairs_per_trace_prefix(self, vocab, data):
        pairs = expose_corrections(self.OneHot(vocab, 0), data.ego_steps, 3, np.random.default_rng(0),
                                   collides=lambda step, tok: tok == 0)
        assert len(pairs) == 3 * len(data.ego_steps)
        assert [ctx.trace for ctx, _ in pairs[:3]] == [(0,), (0, 0), (0, 0, 0)]
        assert all(target == data.ego_steps[i // 3].expert_token for i, (_, target) in enumerate(pairs))

    def test_safe_proposals_produce_nothing(self, vocab, data):
        pairs = expose_corrections(self.OneHot(vocab, 1), data.ego_steps, 3, np.random.default_rng(0),
                                   collides=lambda step, tok: tok == 0)
        assert pairs == []
        assert expose_corrections(self.OneHot(vocab, 0), data.ego_steps, 0, np.random.default_rng(0)) == []

    def test_logged_box_overlap(self, head_on, vocab, data):
        expert = [s.expert_token for s in data.ego_steps]
        assert not proposal_collides(data.ego_steps[0], expert[0], vocab)
        assert proposal_collides(data.ego_steps[5], expert[5], vocab)


def test_pretraining_lowers_imitation_loss(head_on, vocab, data, tmp_path):
    policy = EgoPolicy(vocab, DIMS, seed=0)
    wm = WorldModel(vocab, DIMS, seed=1)
    contexts = [s.context for s in data.ego_steps]
    targets = [s.expert_token for s in data.ego_steps]
    before, _ = policy.imitation_loss_and_grads(contexts, targets)
    result = pretrain(policy, wm, [head_on], PretrainConfig(epochs=6, batch_size=4, lr=1e-2), tmp_path / "il.csv")
    after, _ = policy.imitation_loss_and_grads(contexts, targets)
    assert after < before
    assert before == pytest.approx(math.log(len(vocab)))
    assert len(read_csv(tmp_path / "il.csv")) == len(result.rows) == 12
    assert (tmp_path / "il.csv").read_text(encoding="utf-8").startswith("# schema=pretrain_loss")


def test_divergence_is_reported():
    with pytest.raises(TrainingDivergedError) as info:
        check_finite("pretrain", 7, {"total": float("nan")}, {"w": np.array([1.0, np.inf])})
    assert info.value.details["step"] == 7
    assert info.value.details["non_finite_grads"] == ["w"]


def test_scenario_split_is_positional():
    kept, held = split_scenarios(list(range(10)), 0.2)
    assert held == [4, 9]
    assert len(kept) == 8
