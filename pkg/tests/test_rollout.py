import math

import numpy as np
import pytest

from networks.features import FeatureDims
from planning.correction import CorrectionConfig, CorrectionMode, Sampling
from planning.rollout import PlanningStep, TokenReplayPolicy, rollout
from simulation.engine import SimConfig
from simulation.scene import initial_scene, tokenize_scenario

from .conftest import make_scenario


class ConstantCritic:
    features = FeatureDims()

    def __init__(self, prob: float) -> None:
        self.prob = prob
        self.widths = set()

    def collision_prob(self, features: np.ndarray) -> float:
        self.widths.add(features.shape[-1])
        return self.prob


@pytest.fixture
def head_on():
    return make_scenario(agents=[(60.0, 0.0, math.pi, 8.0)], horizon=8)


def _policy(scenario, vocab):
    return TokenReplayPolicy(vocab, tokenize_scenario(scenario, vocab).expert)


def test_off_equals_full_trace_with_zero_budget(head_on, vocab):
    policy = _policy(head_on, vocab)
    off = rollout(head_on, policy, None, CorrectionConfig(mode=CorrectionMode.OFF), None, SimConfig(), 1)
    zero = rollout(head_on, policy, ConstantCritic(0.9), CorrectionConfig(max_len=0), None, SimConfig(), 1)
    assert [s.executed for s in off.steps] == [s.executed for s in zero.steps]
    assert off.metrics.collided == zero.metrics.collided
    assert off.metrics.progression == zero.metrics.progression
    assert zero.metrics.avg_correction_tokens == 0.0


class FixedDistribution:
    """Same spread-out distribution at every step, so sampling has real choices to make."""

    features = FeatureDims()

    def __init__(self, vocab, seed: int = 7) -> None:
        self.vocab = vocab
        self.dist = np.random.default_rng(seed).dirichlet(np.ones(len(vocab)))

    def propose(self, ctx) -> np.ndarray:
        return self.dist


def test_single_candidate_selection_equals_sampled_off(head_on, vocab):
    policy = FixedDistribution(vocab)
    off_cfg = CorrectionConfig(mode=CorrectionMode.OFF, sampling=Sampling.TEMPERATURE, temperature=1.0)
    one_cfg = CorrectionConfig(mode=CorrectionMode.CANDIDATE_SELECTION, candidates=1, temperature=1.0)
    for seed in (0, 5, 11):
        off = rollout(head_on, policy, None, off_cfg, None, SimConfig(), seed)
        one = rollout(head_on, policy, None, one_cfg, None, SimConfig(), seed)
        assert [s.executed for s in off.steps] == [s.executed for s in one.steps]
        assert off.metrics.progression == one.metrics.progression
    assert len({s.executed for s in off.steps}) > 1


def test_rejected_steps_are_recorded(head_on, vocab):
    critic = ConstantCritic(0.9)
    record = rollout(head_on, _policy(head_on, vocab), critic, CorrectionConfig(max_len=2), None, SimConfig(), 1,
                     keep_contexts=True)
    assert critic.widths == {FeatureDims().critic_width}
    for s in record.steps:
        assert s.exhausted
        assert len(s.proposals) == 3
        assert s.probs == [0.9, 0.9, 0.9]
        assert s.executed == s.proposals[0]
    assert record.metrics.avg_correction_tokens == 2.0 * len(record.steps)
    assert record.metrics.first_flag_step == 0
    assert len(record.contexts) == len(record.steps)
    assert all(ctx.trace == () for ctx in record.contexts)


def test_accepting_critic_leaves_no_trace(head_on, vocab):
    record = rollout(head_on, _policy(head_on, vocab), ConstantCritic(0.1), CorrectionConfig(), None, SimConfig(), 1)
    assert all(s.trace == [] for s in record.steps)
    assert record.metrics.first_flag_step is None


def test_rollouts_are_reproducible(head_on, vocab):
    policy = _policy(head_on, vocab)
    cfg = CorrectionConfig(budget_range=(0, 3))
    first = rollout(head_on, policy, ConstantCritic(0.9), cfg, None, SimConfig(), 42)
    second = rollout(head_on, policy, ConstantCritic(0.9), cfg, None, SimConfig(), 42)
    assert first.to_dict(include_wall_clock=False) == second.to_dict(include_wall_clock=False)
    assert {s.budget for s in first.steps} <= {0, 1, 2, 3}


def test_lookahead_reports_collision_and_progress(head_on, vocab):
    policy = _policy(head_on, vocab)
    planning = PlanningStep(initial_scene(head_on, vocab), head_on, policy, SimConfig())
    collided, progress = planning.lookahead(policy.tokens[0], 0)
    assert collided
    assert 0.0 < progress <= 1.0
