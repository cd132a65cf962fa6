"""
Stage 1: joint imitation pretraining of the ego policy and the world model.

The summed objective is imitation of the expert token, correction (expert token under unsafe trace
prefixes found by exposing the policy to its own colliding proposals) and next-token prediction for
every logged agent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from geometry import boxes_overlap
from models import Scenario
from networks.ego_policy import EgoPolicy
from networks.features import EgoContext
from networks.world_model import WorldModel
from nn.params import adam_update, cosine_lr
from planning.correction import Sampling, sample_token
from tokenizer import TokenVocabulary, decode

from .common import LoggingEngine, check_finite, write_csv
from .dataset import ImitationData, LoggedStep, build_imitation_data, logged_agent_states

LOSS_COLUMNS = ["epoch", "step", "lr", "l_imitation", "l_corr", "l_world", "total", "corr_pairs"]


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 16
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.1
    max_corrections: int = 5
    exposure_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_corrections < 0:
            raise ValueError("max_corrections must be >= 0")


class Proposer(Protocol):
    vocab: TokenVocabulary

    def propose(self, ctx: EgoContext) -> np.ndarray: ...


def proposal_collides(step: LoggedStep, token: int, vocab: TokenVocabulary) -> bool:
    """Whether ``token`` executed from the logged ego state overlaps any logged agent box during the step."""
    scenario = step.scenario
    start = scenario.expert.states[step.t * scenario.substeps_per_token]
    ego = decode(token, start, vocab, scenario.dt)
    agents = logged_agent_states(scenario, step.t)
    return any(boxes_overlap(e.box, states[k].box) for k, e in enumerate(ego) for states in agents)


def expose_corrections(
    policy: Proposer,
    steps: Sequence[LoggedStep],
    max_corrections: int,
    rng: np.random.Generator,
    collides: Optional[Callable[[LoggedStep, int], bool]] = None,
    temperature: float = 1.0,
) -> List[Tuple[EgoContext, int]]:
    """Correction pairs (trace-prefix context, expert token) from the policy's own colliding proposals.

    For every step whose sampled proposal overlaps a logged agent, emit one pair per trace prefix
    ``c = 1..C``, stopping early once a sampled proposal is overlap-free.

    Args:
        collides: ``(step, token) -> bool`` overlap test; defaults to the logged-box check.
    """
    if collides is None:
        vocab = policy.vocab

        def collides(step: LoggedStep, token: int) -> bool:
            return proposal_collides(step, token, vocab)

    pairs: List[Tuple[EgoContext, int]] = []
    if max_corrections < 1:
        return pairs
    for step in steps:
        proposal = sample_token(policy.propose(step.context), Sampling.TEMPERATURE, temperature, rng)
        if not collides(step, proposal):
            continue
        trace = [proposal]
        while True:
            ctx = step.context.with_trace(trace)
            pairs.append((ctx, step.expert_token))
            if len(trace) == max_corrections:
                break
            proposal = sample_token(policy.propose(ctx), Sampling.TEMPERATURE, temperature, rng)
            if not collides(step, proposal):
                break
            trace.append(proposal)
    return pairs


@dataclass
class PretrainResult:
    rows: List[Dict[str, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["total"] if self.rows else float("nan")


def _chunks(order: np.ndarray, n_batches: int) -> List[np.ndarray]:
    if len(order) == 0:
        return [order] * n_batches
    size = int(math.ceil(len(order) / n_batches))
    return [order[i * size : (i + 1) * size] for i in range(n_batches)]


class ImitationTrainer(LoggingEngine):
    def __init__(
        self,
        policy: EgoPolicy,
        world_model: WorldModel,
        scenarios: Sequence[Scenario],
        config: PretrainConfig,
    ) -> None:
        super().__init__()
        if len(policy.vocab) != len(world_model.vocab):
            raise ValueError("Policy and world model use different vocabularies")
        self.policy = policy
        self.world_model = world_model
        self.scenarios = list(scenarios)
        self.config = config
        self._data: Optional[ImitationData] = None

    @property
    def data(self) -> ImitationData:
        if self._data is None:
            self._data = build_imitation_data(self.scenarios, self.policy.vocab, self.policy.features)
        return self._data

    def run(self, loss_csv: Optional[Path] = None) -> PretrainResult:
        cfg = self.config
        data = self.data
        rng = np.random.default_rng(cfg.seed)
        n_batches = max(1, int(math.ceil(len(data.ego_steps) / cfg.batch_size)))
        total_steps = cfg.epochs * n_batches
        result = PretrainResult()
        self._log(
            f"Pretraining on {len(data.ego_steps)} ego steps, {len(data.world_contexts)} agent steps, "
            f"{total_steps} updates"
        )
        step = 0
        for epoch in range(cfg.epochs):
            pairs = expose_corrections(
                self.policy, data.ego_steps, cfg.max_corrections, rng, temperature=cfg.exposure_temperature
            )
            ego_batches = _chunks(rng.permutation(len(data.ego_steps)), n_batches)
            corr_batches = _chunks(rng.permutation(len(pairs)), n_batches)
            world_batches = _chunks(rng.permutation(len(data.world_contexts)), n_batches)
            for ego_idx, corr_idx, world_idx in zip(ego_batches, corr_batches, world_batches):
                lr = cosine_lr(cfg.lr, step, total_steps)
                losses, pi_grads, wm_grads = self._losses(data, pairs, ego_idx, corr_idx, world_idx)
                check_finite("pretrain", step, losses, {**pi_grads, **wm_grads})
                adam_update(self.policy.store, pi_grads, lr, weight_decay=cfg.weight_decay)
                adam_update(self.world_model.store, wm_grads, lr, weight_decay=cfg.weight_decay)
                result.rows.append({"epoch": epoch, "step": step, "lr": lr, **losses, "corr_pairs": len(pairs)})
                step += 1
            last = result.rows[-1]
            self._log(
                f"epoch {epoch + 1}/{cfg.epochs}: total {last['total']:.4f} "
                f"(imit {last['l_imitation']:.4f}, corr {last['l_corr']:.4f}, world {last['l_world']:.4f}), "
                f"{len(pairs)} correction pairs"
            )
        if loss_csv is not None:
            write_csv(loss_csv, LOSS_COLUMNS, result.rows, "pretrain_loss")
        return result

    def _losses(
        self,
        data: ImitationData,
        pairs: Sequence[Tuple[EgoContext, int]],
        ego_idx: np.ndarray,
        corr_idx: np.ndarray,
        world_idx: np.ndarray,
    ) -> Tuple[Dict[str, float], Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        pi_grads: Dict[str, np.ndarray] = {}
        l_imit = l_corr = l_world = 0.0
        if len(ego_idx):
            steps = [data.ego_steps[i] for i in ego_idx]
            l_imit, grads = self.policy.imitation_loss_and_grads([s.context for s in steps], [s.expert_token for s in steps])
            pi_grads.update(grads)
        if len(corr_idx):
            l_corr, grads = self.policy.correction_loss_and_grads(
                [pairs[i][0] for i in corr_idx], [pairs[i][1] for i in corr_idx]
            )
            for name, g in grads.items():
                pi_grads[name] = pi_grads[name] + g if name in pi_grads else g
        wm_grads: Dict[str, np.ndarray] = {}
        if len(world_idx):
            l_world, wm_grads = self.world_model.loss_and_grads(
                [data.world_contexts[i] for i in world_idx], [data.world_targets[i] for i in world_idx]
            )
        losses = {"l_imitation": l_imit, "l_corr": l_corr, "l_world": l_world, "total": l_imit + l_corr + l_world}
        return losses, pi_grads, wm_grads


def pretrain(
    policy: EgoPolicy,
    world_model: WorldModel,
    scenarios: Sequence[Scenario],
    config: PretrainConfig,
    loss_csv: Optional[Path] = None,
    on_log=None,
) -> PretrainResult:
    trainer = ImitationTrainer(policy, world_model, scenarios, config)
    if on_log:
        trainer.on_log(on_log)
    return trainer.run(loss_csv)
