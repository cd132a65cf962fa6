"""Shared builders: straight-road scenarios and a small synthetic motion vocabulary."""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np
import pytest

from models import AgentState, LanePolyline, RoadMap, Route, Scenario, Trajectory
from tokenizer import MotionSegment, TokenVocabulary, build_vocabulary

DT = 0.1
SUBSTEPS = 5


def straight_map(length: float = 300.0, width: float = 3.5) -> RoadMap:
    return RoadMap((LanePolyline("main", ((0.0, 0.0), (length, 0.0)), width),))


def constant_motion(x: float, y: float, heading: float, speed: float, num_states: int, dt: float = DT) -> Trajectory:
    c, s = math.cos(heading), math.sin(heading)
    return Trajectory(
        tuple(AgentState.make(x + c * speed * dt * k, y + s * speed * dt * k, heading, speed) for k in range(num_states)),
        dt,
    )


def make_scenario(
    agents: Sequence[Tuple[float, float, float, float]] = (),
    ego_speed: float = 8.0,
    horizon: int = 4,
    ego_x: float = 10.0,
    name: str = "straight",
) -> Scenario:
    """Ego drives along x at constant speed; every agent moves at constant velocity ``(x, y, heading, speed)``."""
    n = horizon * SUBSTEPS + 1
    expert = constant_motion(ego_x, 0.0, 0.0, ego_speed, n)
    logs = tuple(constant_motion(x, y, h, v, n) for x, y, h, v in agents)
    return Scenario(
        map=straight_map(),
        route=Route(("main",)),
        ego_init=expert.states[0],
        agents_init=tuple(log.states[0] for log in logs),
        expert=expert,
        agent_logs=logs,
        horizon_tokens=horizon,
        name=name,
    )


def arc_segment(speed: float, yaw_rate: float, substeps: int = SUBSTEPS, dt: float = DT) -> MotionSegment:
    """Constant speed and yaw-rate motion expressed in the start frame."""
    x = y = 0.0
    poses: List[Tuple[float, float, float]] = []
    for j in range(1, substeps + 1):
        mid = yaw_rate * (j - 0.5) * dt
        x += speed * dt * math.cos(mid)
        y += speed * dt * math.sin(mid)
        poses.append((x, y, yaw_rate * j * dt))
    return MotionSegment(tuple(poses))


def synthetic_segments() -> List[MotionSegment]:
    return [arc_segment(v, w) for v in np.linspace(0.0, 12.0, 13) for w in np.linspace(-0.4, 0.4, 9)]


@pytest.fixture(scope="session")
def segments() -> List[MotionSegment]:
    return synthetic_segments()


@pytest.fixture(scope="session")
def vocab(segments) -> TokenVocabulary:
    return build_vocabulary(segments, radius=0.25, max_size=256)


@pytest.fixture(scope="session")
def straight_vocab() -> TokenVocabulary:
    """One straight token per integer speed 0..12 m/s."""
    return build_vocabulary([arc_segment(float(v), 0.0) for v in range(13)], radius=0.25, max_size=64)
