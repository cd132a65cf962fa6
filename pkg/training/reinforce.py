"""
Stage 2: model-based REINFORCE with a KL penalty towards the frozen imitation policy.

Rollouts run against the frozen world model; the trajectory reward is credited to executed tokens only.
Rejected trace proposals enter the update solely as conditioning of the executed token's context.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import Scenario
from networks.collision_critic import CollisionCritic
from networks.ego_policy import EgoPolicy
from networks.features import EgoContext
from networks.world_model import WorldModel
from nn.losses import kl_categorical
from nn.params import adam_update, cosine_lr
from planning.correction import CorrectionConfig, CorrectionMode, Sampling, check_trace_capacity
from planning.rollout import TokenReplayPolicy, rollout
from simulation.engine import AgentMode, SimConfig
from simulation.record import RolloutRecord
from simulation.scene import tokenize_scenario

from .common import LoggingEngine, check_finite, write_csv

LOSS_COLUMNS = [
    "epoch",
    "update",
    "lr",
    "surrogate",
    "mean_kl",
    "mean_reward",
    "collision_rate",
    "mean_progression",
    "replay_rollouts",
]


@dataclass(frozen=True)
class RlConfig:
    kl_weight: float = 0.1
    gamma: float = 1.0
    budget_range: Tuple[int, int] = (0, 6)
    replay_mix: float = 0.25
    reward_norm: bool = True
    epochs: int = 3
    rollouts_per_epoch: int = 32
    updates_per_batch: int = 1
    lr: float = 1e-4
    weight_decay: float = 0.1
    threshold: float = 0.75
    temperature: float = 1.0
    self_correction: bool = True
    workers: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.replay_mix <= 1.0:
            raise ValueError("replay_mix must be in [0, 1]")
        if self.epochs < 1 or self.rollouts_per_epoch < 1 or self.updates_per_batch < 1:
            raise ValueError("epochs, rollouts_per_epoch and updates_per_batch must be >= 1")
        lo, hi = self.budget_range
        if lo < 0 or hi < lo:
            raise ValueError("budget_range must satisfy 0 <= low <= high")
        object.__setattr__(self, "budget_range", (int(lo), int(hi)))

    def correction_config(self) -> CorrectionConfig:
        if not self.self_correction:
            return CorrectionConfig(mode=CorrectionMode.OFF, sampling=Sampling.TEMPERATURE,
                                    temperature=self.temperature, max_len=0)
        return CorrectionConfig(
            mode=CorrectionMode.FULL_TRACE,
            threshold=self.threshold,
            sampling=Sampling.TEMPERATURE,
            temperature=self.temperature,
            budget_range=self.budget_range,
        )


@dataclass(frozen=True)
class RewardBreakdown:
    progression: float
    collided: bool
    reward: float


def compute_reward(record: RolloutRecord) -> RewardBreakdown:
    """progression * (1 - collided) - collided."""
    if record.metrics is None:
        raise ValueError("Rollout has no metrics")
    collided = record.metrics.collided
    prog = record.metrics.progression
    return RewardBreakdown(prog, collided, prog * (1.0 - float(collided)) - float(collided))


@dataclass
class RlSample:
    record: RolloutRecord
    reward: RewardBreakdown
    normalized: float
    replay: bool


@dataclass
class RlBatch:
    samples: List[RlSample] = field(default_factory=list)

    @property
    def raw_rewards(self) -> np.ndarray:
        return np.array([s.reward.reward for s in self.samples])


def normalize_rewards(rewards: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    return (rewards - rewards.mean()) / (rewards.std() + eps)


def collect_rollouts(
    policy: EgoPolicy,
    world_model: WorldModel,
    critic: Optional[CollisionCritic],
    scenarios: Sequence[Scenario],
    cfg: RlConfig,
    n: int,
    seed: int,
) -> RlBatch:
    """``round(rho * n)`` expert-replay rollouts plus on-policy rollouts against the world model."""
    if not scenarios:
        raise ValueError("No scenarios to roll out")
    rng = np.random.default_rng(seed)
    n_replay = int(round(cfg.replay_mix * n))
    picks = rng.integers(0, len(scenarios), size=n)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    on_policy_cfg = cfg.correction_config()
    if on_policy_cfg.mode != CorrectionMode.OFF and critic is None:
        raise ValueError("Self-correcting RL rollouts need a collision critic")

    def run(i: int) -> RlSample:
        scenario = scenarios[int(picks[i])]
        if i < n_replay:
            expert = tokenize_scenario(scenario, policy.vocab).expert
            replay = TokenReplayPolicy(policy.vocab, expert, policy.features)
            sim = SimConfig(agent_mode=AgentMode.LOG_REPLAY, horizon_tokens=scenario.horizon_tokens)
            record = rollout(scenario, replay, None, CorrectionConfig(mode=CorrectionMode.OFF), world_model, sim,
                             int(seeds[i]), keep_contexts=True)
        else:
            sim = SimConfig(agent_mode=AgentMode.WORLD_MODEL, horizon_tokens=scenario.horizon_tokens,
                            early_stop=True, world_model_temperature=cfg.temperature)
            record = rollout(scenario, policy, critic, on_policy_cfg, world_model, sim, int(seeds[i]),
                             keep_contexts=True)
        return RlSample(record, compute_reward(record), 0.0, i < n_replay)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            samples = list(pool.map(run, range(n)))
    else:
        samples = [run(i) for i in range(n)]
    batch = RlBatch(samples)
    raw = batch.raw_rewards
    normalized = normalize_rewards(raw) if cfg.reward_norm else raw
    for sample, value in zip(batch.samples, normalized):
        sample.normalized = float(value)
    return batch


def credit_terms(batch: RlBatch, gamma: float) -> List[Tuple[EgoContext, int, float]]:
    """(context, executed token, weight) per executed token; weight = gamma^t * normalized reward."""
    terms: List[Tuple[EgoContext, int, float]] = []
    for sample in batch.samples:
        for t, (step, ctx) in enumerate(zip(sample.record.steps, sample.record.contexts)):
            terms.append((ctx, step.executed, (gamma ** t) * sample.normalized))
    return terms


@dataclass(frozen=True)
class UpdateStats:
    surrogate: float
    mean_kl: float
    terms: int


def reinforce_gradients(
    policy: EgoPolicy,
    il_policy: EgoPolicy,
    terms: Sequence[Tuple[EgoContext, int, float]],
    kl_weight: float,
) -> Tuple[Dict[str, np.ndarray], UpdateStats]:
    """Gradient of ``mean_t[-w_t log pi(a_t) + kl_weight * KL(pi_IL || pi)]``.

    On the logits this is ``w (pi - onehot(a)) + kl_weight (pi - pi_IL)`` per term.
    """
    if not terms:
        return {}, UpdateStats(0.0, 0.0, 0)
    contexts = [t[0] for t in terms]
    tokens = np.array([t[1] for t in terms], dtype=np.int64)
    weights = np.array([t[2] for t in terms], dtype=float)
    probs, cache = policy.forward_batch(contexts)
    p_il = il_policy.propose_batch(contexts)
    rows = np.arange(len(terms))
    onehot = np.zeros_like(probs)
    onehot[rows, tokens] = 1.0
    d_logits = (weights[:, None] * (probs - onehot) + kl_weight * (probs - p_il)) / len(terms)
    kls = np.array([kl_categorical(p_il[i], probs[i]) for i in rows])
    log_probs = np.log(np.maximum(probs[rows, tokens], 1e-12))
    surrogate = float(np.mean(-weights * log_probs + kl_weight * kls))
    return policy.backward_logits(cache, d_logits), UpdateStats(surrogate, float(np.mean(kls)), len(terms))


def reinforce_update(
    policy: EgoPolicy,
    il_policy: EgoPolicy,
    batch: RlBatch,
    cfg: RlConfig,
    lr: Optional[float] = None,
    step: int = 0,
) -> UpdateStats:
    """One AdamW step on the REINFORCE surrogate; updates ``policy`` in place."""
    grads, stats = reinforce_gradients(policy, il_policy, credit_terms(batch, cfg.gamma), cfg.kl_weight)
    check_finite("reinforce", step, {"surrogate": stats.surrogate}, grads)
    adam_update(policy.store, grads, cfg.lr if lr is None else lr, weight_decay=cfg.weight_decay)
    return stats


class ReinforceTrainer(LoggingEngine):
    def __init__(
        self,
        policy: EgoPolicy,
        world_model: WorldModel,
        critic: Optional[CollisionCritic],
        scenarios: Sequence[Scenario],
        config: RlConfig,
    ) -> None:
        super().__init__()
        check_trace_capacity(config.correction_config(), policy.dims.max_trace)
        self.policy = policy
        self.il_policy = policy.frozen()
        self.world_model = world_model.frozen()
        self.critic = critic
        self.scenarios = list(scenarios)
        self.config = config

    def run(self, loss_csv: Optional[Path] = None) -> List[Dict[str, float]]:
        cfg = self.config
        total = cfg.epochs * cfg.updates_per_batch
        rows: List[Dict[str, float]] = []
        update = 0
        for epoch in range(cfg.epochs):
            batch = collect_rollouts(
                self.policy, self.world_model, self.critic, self.scenarios, cfg, cfg.rollouts_per_epoch,
                seed=cfg.seed * 1000 + epoch,
            )
            raw = batch.raw_rewards
            for _ in range(cfg.updates_per_batch):
                lr = cosine_lr(cfg.lr, update, total)
                stats = reinforce_update(self.policy, self.il_policy, batch, cfg, lr, update)
                rows.append({
                    "epoch": epoch,
                    "update": update,
                    "lr": lr,
                    "surrogate": stats.surrogate,
                    "mean_kl": stats.mean_kl,
                    "mean_reward": float(raw.mean()),
                    "collision_rate": float(np.mean([s.reward.collided for s in batch.samples])),
                    "mean_progression": float(np.mean([s.reward.progression for s in batch.samples])),
                    "replay_rollouts": sum(s.replay for s in batch.samples),
                })
                update += 1
            last = rows[-1]
            self._log(
                f"epoch {epoch + 1}/{cfg.epochs}: reward {last['mean_reward']:.3f}, "
                f"collisions {last['collision_rate']:.2%}, KL {last['mean_kl']:.4f}"
            )
        if loss_csv is not None:
            write_csv(loss_csv, LOSS_COLUMNS, rows, "reinforce")
        return rows


def select_hard_examples(
    policy: EgoPolicy,
    world_model: WorldModel,
    scenarios: Sequence[Scenario],
    fraction_rest: float = 0.25,
    seed: int = 0,
) -> List[Scenario]:
    """Scenarios whose uncorrected rollout collides, plus a seeded sample of the rest (order preserved)."""
    off = CorrectionConfig(mode=CorrectionMode.OFF)
    colliding: List[int] = []
    rest: List[int] = []
    for i, scenario in enumerate(scenarios):
        sim = SimConfig(agent_mode=AgentMode.WORLD_MODEL, horizon_tokens=scenario.horizon_tokens)
        record = rollout(scenario, policy, None, off, world_model, sim, seed + i)
        (colliding if record.metrics.collided else rest).append(i)
    rng = np.random.default_rng(seed)
    n_rest = int(math.ceil(fraction_rest * len(rest)))
    sampled = rng.choice(rest, size=n_rest, replace=False).tolist() if n_rest else []
    keep = sorted(colliding + [int(i) for i in sampled])
    return [scenarios[i] for i in keep]
