"""Closed-loop stepping: execute one ego token, advance background agents, flag collisions and off-road."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from geometry import boxes_overlap, offroad, to_frame
from models import DEFAULT_DT, DEFAULT_SUBSTEPS, AgentState, PlannerError, RoadMap, Scenario
from tokenizer import MotionSegment, TokenVocabulary, decode, encode

from .idm import NO_LEADER_GAP, IdmParams, advance_anchor, anchor_for, idm_accel, integrate_speed, leader_of
from .scene import LaneAnchor, SceneState


class SimulationError(PlannerError):
    pass


class AgentMode(Enum):
    LOG_REPLAY = "logreplay"
    IDM = "idm"
    WORLD_MODEL = "worldmodel"


class AgentSampler(Protocol):
    def sample_agents_step(
        self, scene: SceneState, road_map: RoadMap, dt: float, temperature: float, rng: np.random.Generator
    ) -> List[int]: ...


@dataclass(frozen=True)
class SimConfig:
    dt: float = DEFAULT_DT
    substeps_per_token: int = DEFAULT_SUBSTEPS
    horizon_tokens: int = 16
    agent_mode: AgentMode = AgentMode.LOG_REPLAY
    idm: IdmParams = field(default_factory=IdmParams)
    early_stop: bool = False
    world_model_temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps_per_token < 1:
            raise ValueError("substeps_per_token must be >= 1")
        if self.horizon_tokens < 1:
            raise ValueError("horizon_tokens must be >= 1")
        if self.world_model_temperature < 0:
            raise ValueError("world_model_temperature must be >= 0")

    def horizon_for(self, scenario: Scenario) -> int:
        """Planning steps of a rollout: the configured horizon, capped by what the scenario logs cover."""
        return min(self.horizon_tokens, scenario.horizon_tokens)


@dataclass
class StepEvents:
    ego_states: List[AgentState]
    agent_states: List[List[AgentState]]
    agent_tokens: List[int]
    collisions: List[bool]
    offroad: List[bool]


def realized_token(start: AgentState, states: Sequence[AgentState], vocab: TokenVocabulary) -> int:
    rel = tuple(to_frame(s.pose, start.pose).to_tuple() for s in states)
    return encode(MotionSegment(rel), vocab)


def event_flags(
    ego_states: Sequence[AgentState],
    agent_states: Sequence[Sequence[AgentState]],
    road_map: RoadMap,
) -> Tuple[List[bool], List[bool]]:
    """Per-sub-step collision and off-road flags of the ego."""
    collisions: List[bool] = []
    off: List[bool] = []
    for k, ego in enumerate(ego_states):
        collisions.append(any(boxes_overlap(ego.box, states[k].box) for states in agent_states))
        off.append(offroad(ego.box, road_map))
    return collisions, off


def _idm_substeps(
    scene: SceneState,
    ego_states: Sequence[AgentState],
    road_map: RoadMap,
    cfg: SimConfig,
) -> Tuple[List[List[AgentState]], List[Optional[LaneAnchor]]]:
    n = scene.num_agents
    anchors: List[Optional[LaneAnchor]] = [None] + [
        a if a is not None else anchor_for(s, road_map) for a, s in zip(scene.anchors[1:], scene.agents[1:])
    ]
    current = list(scene.agents)
    per_agent: List[List[AgentState]] = [[] for _ in range(n - 1)]
    ego_track = [scene.ego] + list(ego_states)
    for k in range(cfg.substeps_per_token):
        current[0] = ego_track[k]
        nxt = list(current)
        for i in range(1, n):
            me = current[i]
            lead = leader_of(i, current, anchors, road_map)
            gap, v_lead = (lead[1], current[lead[0]].speed) if lead else (NO_LEADER_GAP, me.speed)
            accel = idm_accel(me.speed, v_lead, gap, cfg.idm)
            speed, distance = integrate_speed(me.speed, accel, cfg.dt)
            anchor = advance_anchor(anchors[i], distance, road_map)
            nxt[i] = me.moved(road_map.lane(anchor.lane_id).pose_at(anchor.s), speed)
            anchors[i] = anchor
            per_agent[i - 1].append(nxt[i])
        current = nxt
    return per_agent, anchors


def step(
    scene: SceneState,
    ego_token: int,
    scenario: Scenario,
    vocab: TokenVocabulary,
    cfg: SimConfig,
    world_model: Optional[AgentSampler] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[SceneState, StepEvents]:
    """Advance the scene by one planning step.

    The ego executes ``ego_token``; background agents replay their logs, follow IDM along their lanes,
    or execute one token sampled from ``world_model``.
    """
    substeps = cfg.substeps_per_token
    if substeps != vocab.substeps:
        raise SimulationError(f"Simulator uses {substeps} sub-steps, vocabulary {vocab.substeps}")
    ego_states = decode(ego_token, scene.ego, vocab, cfg.dt)
    anchors: Optional[List[Optional[LaneAnchor]]] = None

    if cfg.agent_mode == AgentMode.LOG_REPLAY:
        start = scene.step * substeps
        agent_states = []
        for i, log in enumerate(scenario.agent_logs):
            if len(log.states) < start + substeps + 1:
                raise SimulationError(
                    f"Agent {i + 1} log ends before step {scene.step}", {"agent": i + 1, "step": scene.step}
                )
            agent_states.append(list(log.states[start + 1 : start + substeps + 1]))
        agent_tokens = [realized_token(scene.agents[i + 1], s, vocab) for i, s in enumerate(agent_states)]
    elif cfg.agent_mode == AgentMode.IDM:
        agent_states, anchors = _idm_substeps(scene, ego_states, scenario.map, cfg)
        agent_tokens = [realized_token(scene.agents[i + 1], s, vocab) for i, s in enumerate(agent_states)]
    else:
        if world_model is None:
            raise SimulationError("World-model agent mode needs a world model")
        rng = rng if rng is not None else np.random.default_rng(0)
        agent_tokens = world_model.sample_agents_step(scene, scenario.map, cfg.dt, cfg.world_model_temperature, rng)
        agent_states = [decode(tok, scene.agents[i + 1], vocab, cfg.dt) for i, tok in enumerate(agent_tokens)]

    collisions, off = event_flags(ego_states, agent_states, scenario.map)
    next_scene = scene.advanced(
        agents=[ego_states[-1]] + [states[-1] for states in agent_states],
        tokens=[int(ego_token)] + list(agent_tokens),
        ego_substeps=ego_states,
        anchors=anchors,
    )
    return next_scene, StepEvents(ego_states, agent_states, list(agent_tokens), collisions, off)
