"""
Propose, evaluate, correct.

``select_action`` asks the policy for a token, lets the critic score it and, while the score is at or
above the threshold, appends the rejected token to the correction trace and asks again. The other modes
are the alternative selection strategies used as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from networks.common import ModelError
from networks.features import EgoContext


class CorrectionMode(Enum):
    OFF = "off"
    FULL_TRACE = "full_trace"
    LAST_TOKEN_ONLY = "last_token_only"
    REJECTION_SAMPLING = "rejection_sampling"
    CANDIDATE_SELECTION = "candidate_selection"


class Sampling(Enum):
    GREEDY = "greedy"
    TEMPERATURE = "temperature"


@dataclass(frozen=True)
class CorrectionConfig:
    """Correction settings; ``max_len`` is the correction budget C per planning step.

    ``budget_range`` (inclusive) replaces ``max_len`` with a uniform draw per step. The repeat guard
    only acts under greedy sampling.
    """
    mode: CorrectionMode = CorrectionMode.FULL_TRACE
    threshold: float = 0.75
    max_len: int = 5
    candidates: int = 10
    sampling: Sampling = Sampling.GREEDY
    temperature: float = 1.0
    repeat_guard: bool = True
    budget_range: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.max_len < 0:
            raise ValueError("max_len must be >= 0")
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.budget_range is not None:
            lo, hi = self.budget_range
            if lo < 0 or hi < lo:
                raise ValueError("budget_range must satisfy 0 <= low <= high")
            object.__setattr__(self, "budget_range", (int(lo), int(hi)))

    @property
    def trace_capacity(self) -> int:
        """Longest correction trace the policy can be shown under this configuration."""
        budget = self.max_len if self.budget_range is None else self.budget_range[1]
        if self.mode == CorrectionMode.FULL_TRACE:
            return budget
        if self.mode == CorrectionMode.LAST_TOKEN_ONLY:
            return min(budget, 1)
        return 0


def check_trace_capacity(cfg: CorrectionConfig, max_trace: int, name: str = "policy") -> None:
    if cfg.trace_capacity > max_trace:
        raise ModelError(
            f"Correction budget {cfg.trace_capacity} ({cfg.mode.value}) exceeds the {name} trace capacity {max_trace}",
            {"budget": cfg.trace_capacity, "max_trace": max_trace},
        )


@dataclass
class CorrectionOutcome:
    executed: int
    trace: List[int]
    probs: List[Optional[float]]
    exhausted: bool
    executed_index: int
    budget: int
    proposals: List[int] = field(default_factory=list)
    guard_flagged: bool = False
    dists: List[np.ndarray] = field(default_factory=list, repr=False, compare=False)
    executed_context: Optional[EgoContext] = field(default=None, repr=False, compare=False)


class Proposer(Protocol):
    def propose(self, ctx: EgoContext) -> np.ndarray: ...


class RiskCritic(Protocol):
    def collision_prob(self, features: np.ndarray) -> float: ...


class StepContext(Protocol):
    """Everything the selector needs about the current planning step."""

    def ego_context(self, trace: Sequence[int]) -> EgoContext: ...

    def critic_features(self, token: int) -> np.ndarray: ...

    def lookahead(self, first_token: int, candidate: int) -> Tuple[bool, float]: ...


def repeat_guard(trace: Sequence[int], proposal: int, probs: np.ndarray, sampling: Sampling) -> Tuple[int, bool]:
    """Swap an already-rejected greedy proposal for the best token not in the trace.

    Returns ``(token, flagged)``; ``flagged`` marks the degenerate case where the trace covers the
    whole vocabulary and the argmax is returned anyway.
    """
    if sampling != Sampling.GREEDY or proposal not in trace:
        return int(proposal), False
    rejected = set(int(t) for t in trace)
    # stable sort keeps the lowest id first among equal probabilities
    for token in np.argsort(-np.asarray(probs), kind="stable"):
        if int(token) not in rejected:
            return int(token), False
    return int(np.argmax(probs)), True


def sample_token(probs: np.ndarray, sampling: Sampling, temperature: float, rng: np.random.Generator) -> int:
    if sampling == Sampling.GREEDY:
        return int(np.argmax(probs))
    scaled = np.power(np.asarray(probs, dtype=float), 1.0 / temperature)
    return int(rng.choice(len(scaled), p=scaled / scaled.sum()))


def _draw(trace: Sequence[int], dist: np.ndarray, cfg: CorrectionConfig, rng: np.random.Generator) -> Tuple[int, bool]:
    token = sample_token(dist, cfg.sampling, cfg.temperature, rng)
    if cfg.repeat_guard:
        return repeat_guard(trace, token, dist, cfg.sampling)
    return token, False


def draw_budget(cfg: CorrectionConfig, rng: np.random.Generator) -> int:
    if cfg.budget_range is None:
        return cfg.max_len
    lo, hi = cfg.budget_range
    return int(rng.integers(lo, hi + 1))


def select_action(
    policy: Proposer,
    critic: Optional[RiskCritic],
    step_context: StepContext,
    cfg: CorrectionConfig,
    rng: np.random.Generator,
    budget: Optional[int] = None,
) -> CorrectionOutcome:
    """Choose the token to execute at this planning step.

    Args:
        budget: correction budget C for this step; defaults to ``cfg.max_len``.
    """
    budget = cfg.max_len if budget is None else budget

    if cfg.mode == CorrectionMode.OFF:
        ctx = step_context.ego_context(())
        dist = policy.propose(ctx)
        token, flagged = _draw((), dist, cfg, rng)
        return CorrectionOutcome(token, [], [None], False, 0, budget, [token], flagged, [dist], ctx)

    if cfg.mode == CorrectionMode.CANDIDATE_SELECTION:
        return _candidate_selection(policy, step_context, cfg, rng, budget)

    if critic is None:
        raise ValueError(f"Correction mode {cfg.mode.value} needs a collision critic")

    proposals: List[int] = []
    probs: List[float] = []
    dists: List[np.ndarray] = []
    contexts: List[EgoContext] = []
    guard_flagged = False
    base_dist: Optional[np.ndarray] = None
    for c in range(budget + 1):
        trace = proposals[:]
        if cfg.mode == CorrectionMode.REJECTION_SAMPLING:
            if base_dist is None:
                contexts.append(step_context.ego_context(()))
                base_dist = policy.propose(contexts[-1])
            else:
                contexts.append(contexts[0])
            dist = base_dist
        else:
            visible = trace[-1:] if cfg.mode == CorrectionMode.LAST_TOKEN_ONLY else trace
            contexts.append(step_context.ego_context(visible))
            dist = policy.propose(contexts[-1])
        token, flagged = _draw(trace, dist, cfg, rng)
        guard_flagged = guard_flagged or flagged
        prob = critic.collision_prob(step_context.critic_features(token))
        proposals.append(token)
        probs.append(prob)
        dists.append(dist)
        if prob < cfg.threshold:
            return CorrectionOutcome(token, proposals[:-1], list(probs), False, c, budget, proposals, guard_flagged,
                                     dists, contexts[-1])

    best = int(np.argmin(probs))
    return CorrectionOutcome(proposals[best], proposals[:-1], list(probs), True, best, budget, proposals,
                             guard_flagged, dists, contexts[best])


def _candidate_selection(
    policy: Proposer,
    step_context: StepContext,
    cfg: CorrectionConfig,
    rng: np.random.Generator,
    budget: int,
) -> CorrectionOutcome:
    """Sample first tokens, roll each to the horizon, prefer collision-free, then highest progression."""
    ctx = step_context.ego_context(())
    dist = policy.propose(ctx)
    best: Optional[Tuple[bool, float, int]] = None
    for i in range(cfg.candidates):
        token = sample_token(dist, Sampling.TEMPERATURE, cfg.temperature, rng)
        collided, progress = step_context.lookahead(token, i)
        key = (collided, progress, token)
        if best is None or (collided, -progress) < (best[0], -best[1]):
            best = key
    assert best is not None
    collided, _, token = best
    return CorrectionOutcome(token, [], [1.0 if collided else 0.0], False, 0, budget, [token], False, [dist], ctx)
