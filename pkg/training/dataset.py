"""Teacher-forced training examples taken from scenario logs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from models import AgentState, Scenario
from networks.features import AgentContext, EgoContext, FeatureDims, build_agent_context, build_ego_context
from simulation.scene import ScenarioTokens, logged_scene, tokenize_scenario
from tokenizer import TokenVocabulary


@dataclass(frozen=True)
class LoggedStep:
    """The ego's situation at planning step ``t`` of a scenario's logs."""
    scenario: Scenario
    t: int
    context: EgoContext
    expert_token: int


@dataclass
class ImitationData:
    ego_steps: List[LoggedStep]
    world_contexts: List[AgentContext]
    world_targets: List[int]


def logged_future(scenario: Scenario, t: int) -> dict:
    """Logged end state of every background agent after step ``t`` (stand-in for world-model predictions)."""
    idx = (t + 1) * scenario.substeps_per_token
    return {j + 1: log.states[idx] for j, log in enumerate(scenario.agent_logs)}


def build_imitation_data(
    scenarios: Sequence[Scenario],
    vocab: TokenVocabulary,
    features: FeatureDims = FeatureDims(),
) -> ImitationData:
    """Ego contexts with expert tokens, and per-agent world-model contexts with logged tokens."""
    data = ImitationData([], [], [])
    for scenario in scenarios:
        tokens: ScenarioTokens = tokenize_scenario(scenario, vocab)
        for t in range(scenario.horizon_tokens):
            scene = logged_scene(scenario, t, vocab, tokens, features.history)
            ctx = build_ego_context(
                scene, scenario.map, scenario.route, vocab, scenario.dt, logged_future(scenario, t), (), features
            )
            data.ego_steps.append(LoggedStep(scenario, t, ctx, tokens.expert[t]))
            for agent in range(scene.num_agents):
                data.world_contexts.append(build_agent_context(scene, agent, scenario.map, vocab, scenario.dt, features))
                data.world_targets.append(tokens.sequences[agent][t])
    return data


def logged_agent_states(scenario: Scenario, t: int) -> List[List[AgentState]]:
    """Logged sub-step states of every background agent during step ``t``."""
    s = scenario.substeps_per_token
    return [list(log.states[t * s + 1 : t * s + s + 1]) for log in scenario.agent_logs]


def split_scenarios(scenarios: Sequence[Scenario], holdout: float) -> Tuple[List[Scenario], List[Scenario]]:
    """Deterministic split by position: every ``round(1/holdout)``-th scenario is held out."""
    if holdout <= 0.0:
        return list(scenarios), []
    stride = max(2, int(round(1.0 / holdout)))
    held = [s for i, s in enumerate(scenarios) if i % stride == stride - 1]
    kept = [s for i, s in enumerate(scenarios) if i % stride != stride - 1]
    return kept, held
