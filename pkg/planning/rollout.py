"""Closed-loop rollouts: one correction-loop decision and one simulator step per planning step."""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from geometry import progression
from models import AgentState, Scenario, Trajectory
from networks.features import EgoContext, FeatureDims, build_ego_context, critic_features
from simulation.engine import AgentMode, SimConfig, event_flags, step
from simulation.record import RolloutMetrics, RolloutRecord, StepRecord
from simulation.scene import SceneState, initial_scene
from tokenizer import TokenVocabulary, decode

from .correction import (
    CorrectionConfig,
    CorrectionMode,
    RiskCritic,
    Sampling,
    draw_budget,
    select_action,
)


class Policy(Protocol):
    vocab: TokenVocabulary
    features: FeatureDims

    def propose(self, ctx: EgoContext) -> np.ndarray: ...


class Critic(RiskCritic, Protocol):
    features: FeatureDims


class TokenReplayPolicy:
    """Deterministic policy that proposes a fixed token sequence (one-hot), e.g. the expert's tokens."""

    def __init__(self, vocab: TokenVocabulary, tokens: Sequence[int], features: FeatureDims = FeatureDims()) -> None:
        if not tokens:
            raise ValueError("Replay policy needs at least one token")
        self.vocab = vocab
        self.tokens = [int(t) for t in tokens]
        self.features = features

    def propose(self, ctx: EgoContext) -> np.ndarray:
        dist = np.zeros(len(self.vocab))
        dist[self.tokens[min(ctx.step, len(self.tokens) - 1)]] = 1.0
        return dist


class PlanningStep:
    """Step context for :func:`select_action` at one scene."""

    def __init__(
        self,
        scene: SceneState,
        scenario: Scenario,
        policy: Policy,
        sim_cfg: SimConfig,
        world_model=None,
        critic_dims: Optional[FeatureDims] = None,
        lookahead_cfg: Optional[CorrectionConfig] = None,
        lookahead_seed: int = 0,
    ) -> None:
        self.scene = scene
        self.scenario = scenario
        self.policy = policy
        self.vocab = policy.vocab
        self.sim_cfg = sim_cfg
        self.world_model = world_model
        self.critic_dims = critic_dims or policy.features
        self.lookahead_cfg = lookahead_cfg
        self.lookahead_seed = lookahead_seed
        self._base: Optional[EgoContext] = None

    def predicted_states(self) -> Optional[Dict[int, AgentState]]:
        if self.world_model is None:
            return None
        return self.world_model.predicted_states(self.scene, self.scenario.map, self.sim_cfg.dt)

    def ego_context(self, trace: Sequence[int]) -> EgoContext:
        if self._base is None:
            self._base = build_ego_context(
                self.scene,
                self.scenario.map,
                self.scenario.route,
                self.vocab,
                self.sim_cfg.dt,
                self.predicted_states(),
                (),
                self.policy.features,
            )
        return self._base.with_trace(trace)

    def critic_features(self, token: int) -> np.ndarray:
        return critic_features(self.scene, decode(token, self.scene.ego, self.vocab, self.sim_cfg.dt), self.critic_dims)

    def lookahead(self, first_token: int, candidate: int) -> Tuple[bool, float]:
        """Roll the rest of the horizon after ``first_token`` with an uncorrected, sampling policy.

        Agents are driven by the world model when one is available. Uses its own random stream so the
        rollout's main stream is untouched.
        """
        rng = np.random.default_rng([self.lookahead_seed, self.scene.step, candidate])
        mode = AgentMode.WORLD_MODEL if self.world_model is not None else self.sim_cfg.agent_mode
        sim_cfg = replace(self.sim_cfg, agent_mode=mode)
        temperature = self.lookahead_cfg.temperature if self.lookahead_cfg else 1.0
        off_cfg = CorrectionConfig(mode=CorrectionMode.OFF, sampling=Sampling.TEMPERATURE, temperature=temperature)
        scene, events = step(self.scene, first_token, self.scenario, self.vocab, sim_cfg, self.world_model, rng)
        collided = any(events.collisions)
        for _ in range(scene.step, sim_cfg.horizon_for(self.scenario)):
            planning = PlanningStep(scene, self.scenario, self.policy, sim_cfg, self.world_model)
            token = select_action(self.policy, None, planning, off_cfg, rng).executed
            scene, events = step(scene, token, self.scenario, self.vocab, sim_cfg, self.world_model, rng)
            collided = collided or any(events.collisions)
        final = Trajectory([self.scene.ego, scene.ego], self.sim_cfg.dt)
        return collided, progression(final, self.scenario.expert)


def _first_flag(steps: Sequence[StepRecord], threshold: float) -> Optional[int]:
    for record in steps:
        if any(p is not None and p >= threshold for p in record.probs):
            return record.step
    return None


def rollout(
    scenario: Scenario,
    policy: Policy,
    critic: Optional[Critic],
    correction_cfg: CorrectionConfig,
    world_model,
    sim_cfg: SimConfig,
    rng_seed: int,
    keep_contexts: bool = False,
) -> RolloutRecord:
    """Run one scenario closed-loop; deterministic given ``rng_seed`` (wall-clock aside)."""
    started = time.perf_counter()
    vocab = policy.vocab
    rng = np.random.default_rng(rng_seed)
    scene = initial_scene(scenario, vocab)
    record = RolloutRecord(
        scenario_name=scenario.name,
        seed=int(rng_seed),
        mode=correction_cfg.mode.value,
        agent_mode=sim_cfg.agent_mode.value,
        dt=sim_cfg.dt,
        initial_ego=scenario.ego_init,
    )
    for _ in range(sim_cfg.horizon_for(scenario)):
        planning = PlanningStep(
            scene,
            scenario,
            policy,
            sim_cfg,
            world_model,
            critic.features if critic is not None else None,
            correction_cfg,
            rng_seed,
        )
        budget = draw_budget(correction_cfg, rng)
        outcome = select_action(policy, critic, planning, correction_cfg, rng, budget)
        next_scene, events = step(scene, outcome.executed, scenario, vocab, sim_cfg, world_model, rng)
        record.steps.append(
            StepRecord(
                step=scene.step,
                scene=scene,
                proposals=list(outcome.proposals),
                probs=list(outcome.probs),
                executed=outcome.executed,
                executed_index=outcome.executed_index,
                budget=budget,
                exhausted=outcome.exhausted,
                ego_states=events.ego_states,
                agent_states=events.agent_states,
                collisions=events.collisions,
                offroad=events.offroad,
            )
        )
        if keep_contexts:
            record.contexts.append(outcome.executed_context)
        scene = next_scene
        if sim_cfg.early_stop and any(events.collisions):
            break

    collision_steps = [s.step for s in record.steps if s.collided]
    record.metrics = RolloutMetrics(
        collided=bool(collision_steps),
        offroad=any(any(s.offroad) for s in record.steps),
        progression=progression(record.ego_trajectory(), scenario.expert),
        avg_correction_tokens=float(sum(s.correction_tokens for s in record.steps)),
        wall_clock=time.perf_counter() - started,
        collision_step=collision_steps[0] if collision_steps else None,
        first_flag_step=_first_flag(record.steps, correction_cfg.threshold),
    )
    return record


def recompute_flags(record: RolloutRecord, scenario: Scenario) -> Tuple[List[List[bool]], List[List[bool]]]:
    """Collision and off-road flags rebuilt from the stored states."""
    collisions, off = [], []
    for s in record.steps:
        c, o = event_flags(s.ego_states, s.agent_states, scenario.map)
        collisions.append(c)
        off.append(o)
    return collisions, off
