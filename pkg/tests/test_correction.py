from types import SimpleNamespace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pytest

from networks import ModelError
from planning.correction import (
    CorrectionConfig,
    CorrectionMode,
    Sampling,
    check_trace_capacity,
    draw_budget,
    repeat_guard,
    select_action,
)

BASE = np.array([0.4, 0.25, 0.15, 0.1, 0.06, 0.04])


class ScriptedPolicy:
    """Fixed preference order; optionally removes already-rejected tokens from its distribution."""

    def __init__(self, base: np.ndarray = BASE, follow_trace: bool = True) -> None:
        self.base = base
        self.follow_trace = follow_trace
        self.seen: List[Tuple[int, ...]] = []

    def propose(self, ctx) -> np.ndarray:
        self.seen.append(tuple(ctx.trace))
        dist = self.base.copy()
        if self.follow_trace and len(set(ctx.trace)) < len(dist):
            dist[list(ctx.trace)] = 0.0
        return dist / dist.sum()


class TableCritic:
    def __init__(self, risk: Dict[int, float], default: float = 0.0) -> None:
        self.risk = risk
        self.default = default
        self.calls = 0

    def collision_prob(self, features: np.ndarray) -> float:
        self.calls += 1
        return self.risk.get(int(features[0]), self.default)


class ForbiddenCritic:
    def collision_prob(self, features: np.ndarray) -> float:
        raise AssertionError("critic must not be queried")


class TableStep:
    def __init__(self, outcomes: Dict[int, Tuple[bool, float]] = None) -> None:
        self.outcomes = outcomes or {}

    def ego_context(self, trace: Sequence[int]):
        return SimpleNamespace(trace=tuple(trace), step=0)

    def critic_features(self, token: int) -> np.ndarray:
        return np.array([float(token)])

    def lookahead(self, first_token: int, candidate: int) -> Tuple[bool, float]:
        return self.outcomes[first_token]


def _select(policy, critic, cfg, seed=0, budget=None, step=None):
    return select_action(policy, critic, step or TableStep(), cfg, np.random.default_rng(seed), budget)


def test_off_mode_never_queries_the_critic():
    outcome = _select(ScriptedPolicy(), ForbiddenCritic(), CorrectionConfig(mode=CorrectionMode.OFF))
    assert outcome.executed == 0
    assert outcome.probs == [None]
    assert outcome.trace == []


class TestFullTrace:
    def test_corrects_until_a_proposal_is_accepted(self):
        policy = ScriptedPolicy()
        outcome = _select(policy, TableCritic({0: 0.9, 1: 0.8, 2: 0.1}), CorrectionConfig())
        assert outcome.executed == 2
        assert outcome.trace == [0, 1]
        assert outcome.probs == [0.9, 0.8, 0.1]
        assert outcome.executed_index == 2
        assert not outcome.exhausted
        assert policy.seen == [(), (0,), (0, 1)]

    def test_probability_at_threshold_is_rejected(self):
        outcome = _select(ScriptedPolicy(), TableCritic({0: 0.75, 1: 0.2}), CorrectionConfig(threshold=0.75))
        assert outcome.executed == 1

    def test_exhausted_budget_executes_least_risky_proposal(self):
        critic = TableCritic({0: 0.9, 1: 0.95, 2: 0.8, 3: 0.85}, default=0.99)
        outcome = _select(ScriptedPolicy(), critic, CorrectionConfig(max_len=3))
        assert outcome.exhausted
        assert outcome.proposals == [0, 1, 2, 3]
        assert outcome.trace == [0, 1, 2]
        assert outcome.executed == 2
        assert outcome.executed_index == 2
        assert critic.calls == 4

    def test_zero_budget_executes_the_first_proposal(self):
        outcome = _select(ScriptedPolicy(), TableCritic({}, default=0.99), CorrectionConfig(), budget=0)
        assert outcome.executed == 0
        assert outcome.trace == []
        assert outcome.exhausted

    def test_needs_a_critic(self):
        with pytest.raises(ValueError):
            _select(ScriptedPolicy(), None, CorrectionConfig())


def test_last_token_only_sees_the_latest_rejection():
    policy = ScriptedPolicy(follow_trace=False)
    cfg = CorrectionConfig(mode=CorrectionMode.LAST_TOKEN_ONLY)
    outcome = _select(policy, TableCritic({0: 0.9, 1: 0.9, 2: 0.1}), cfg)
    assert policy.seen == [(), (0,), (1,)]
    assert outcome.proposals == [0, 1, 2]


def test_rejection_sampling_reuses_one_distribution():
    policy = ScriptedPolicy(follow_trace=False)
    cfg = CorrectionConfig(mode=CorrectionMode.REJECTION_SAMPLING, sampling=Sampling.TEMPERATURE, max_len=20)
    outcome = _select(policy, TableCritic({0: 0.9}, default=0.1), cfg, seed=5)
    assert len(policy.seen) == 1
    assert not outcome.exhausted
    assert outcome.executed != 0
    assert all(d is outcome.dists[0] for d in outcome.dists)


def test_full_trace_distributions_depend_on_the_trace():
    outcome = _select(ScriptedPolicy(), TableCritic({0: 0.9, 1: 0.9}), CorrectionConfig())
    assert len(outcome.dists) == 3
    assert not np.allclose(outcome.dists[0], outcome.dists[1])


class TestRepeatGuard:
    def test_greedy_repeats_are_replaced(self):
        critic = TableCritic({}, default=0.9)
        guarded = _select(ScriptedPolicy(follow_trace=False), critic, CorrectionConfig(max_len=2))
        assert guarded.proposals == [0, 1, 2]
        unguarded = _select(ScriptedPolicy(follow_trace=False), critic, CorrectionConfig(max_len=2, repeat_guard=False))
        assert unguarded.proposals == [0, 0, 0]

    def test_ties_go_to_the_lowest_id(self):
        assert repeat_guard([0], 0, np.full(4, 0.25), Sampling.GREEDY) == (1, False)

    def test_full_vocabulary_trace_is_flagged(self):
        assert repeat_guard([0, 1, 2], 1, np.array([0.2, 0.5, 0.3]), Sampling.GREEDY) == (1, True)

    def test_sampling_is_left_alone(self):
        assert repeat_guard([1], 1, np.array([0.2, 0.5, 0.3]), Sampling.TEMPERATURE) == (1, False)


class TestCandidateSelection:
    base = np.array([0.4, 0.3, 0.3, 0.0, 0.0, 0.0])

    def test_prefers_collision_free_then_progress(self):
        step = TableStep({0: (True, 0.9), 1: (False, 0.3), 2: (False, 0.6)})
        cfg = CorrectionConfig(mode=CorrectionMode.CANDIDATE_SELECTION, candidates=30)
        outcome = _select(ScriptedPolicy(self.base), ForbiddenCritic(), cfg, seed=2, step=step)
        assert outcome.executed == 2
        assert outcome.probs == [0.0]

    def test_all_candidates_colliding(self):
        step = TableStep({0: (True, 0.2), 1: (True, 0.8), 2: (True, 0.5)})
        cfg = CorrectionConfig(mode=CorrectionMode.CANDIDATE_SELECTION, candidates=30)
        outcome = _select(ScriptedPolicy(self.base), None, cfg, seed=2, step=step)
        assert outcome.executed == 1
        assert outcome.probs == [1.0]


def test_budget_range_draws_every_value():
    cfg = CorrectionConfig(budget_range=(2, 4))
    rng = np.random.default_rng(0)
    draws = {draw_budget(cfg, rng) for _ in range(200)}
    assert draws == {2, 3, 4}
    assert draw_budget(CorrectionConfig(max_len=7), rng) == 7


@pytest.mark.parametrize(
    "kwargs",
    [{"threshold": 1.5}, {"max_len": -1}, {"candidates": 0}, {"temperature": 0.0}, {"budget_range": (3, 1)}],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        CorrectionConfig(**kwargs)


@pytest.mark.parametrize(
    "kwargs, capacity",
    [
        ({}, 5),
        ({"budget_range": (0, 8)}, 8),
        ({"mode": CorrectionMode.LAST_TOKEN_ONLY, "max_len": 9}, 1),
        ({"mode": CorrectionMode.LAST_TOKEN_ONLY, "max_len": 0}, 0),
        ({"mode": CorrectionMode.REJECTION_SAMPLING, "max_len": 9}, 0),
        ({"mode": CorrectionMode.CANDIDATE_SELECTION}, 0),
        ({"mode": CorrectionMode.OFF}, 0),
    ],
)
def test_trace_capacity(kwargs, capacity):
    assert CorrectionConfig(**kwargs).trace_capacity == capacity


def test_capacity_check():
    check_trace_capacity(CorrectionConfig(max_len=10), 10)
    with pytest.raises(ModelError) as info:
        check_trace_capacity(CorrectionConfig(max_len=11), 10)
    assert info.value.details == {"budget": 11, "max_trace": 10}


def test_same_seed_same_outcome():
    cfg = CorrectionConfig(sampling=Sampling.TEMPERATURE, max_len=4)
    critic = TableCritic({0: 0.9, 1: 0.9})
    a = _select(ScriptedPolicy(), critic, cfg, seed=9)
    b = _select(ScriptedPolicy(), critic, cfg, seed=9)
    assert (a.proposals, a.probs, a.executed) == (b.proposals, b.probs, b.executed)
