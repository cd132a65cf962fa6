"""
Privileged scripted expert used to produce the demonstration trajectories of the scenario suite.

The expert tracks the route centerline; its speed follows IDM against everything it can see on its
path (background agents projected onto the path, plus an optional virtual stop wall before the
conflict zone). Because it knows every agent's logged future, it searches the earliest release time
for the wall that yields a collision-free, on-road trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from geometry import boxes_overlap, offroad, path_arc_length
from models import (
    AgentState,
    OrientedBox,
    RoadMap,
    Route,
    Trajectory,
    pose_along_polyline,
    project_onto_polyline,
)
from simulation.idm import NO_LEADER_GAP, IdmParams, idm_accel, integrate_speed


@dataclass(frozen=True)
class ExpertParams:
    idm: IdmParams = field(default_factory=IdmParams)
    lateral_tolerance: float = 2.0
    safety_margin: float = 0.5
    wait_step: float = 0.5
    lateral_accel: float = 3.0
    curve_lookahead: float = 25.0

    def __post_init__(self) -> None:
        if self.lateral_tolerance <= 0 or self.wait_step <= 0 or self.lateral_accel <= 0:
            raise ValueError("lateral_tolerance, wait_step and lateral_accel must be positive")
        if self.safety_margin < 0:
            raise ValueError("safety_margin must be >= 0")


class PathFollower:
    """Arc-length parametrized driving path (the route centerline)."""

    def __init__(self, road_map: RoadMap, route: Route) -> None:
        self.points = route.centerline(road_map)
        self.cumulative = path_arc_length(self.points)

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def state_at(self, s: float, speed: float, template: AgentState) -> AgentState:
        return template.moved(pose_along_polyline(self.points, self.cumulative, s), speed)

    def project(self, state: AgentState) -> Tuple[float, float]:
        return project_onto_polyline(self.points, self.cumulative, state.pose.x, state.pose.y)

    def curvature_ahead(self, s: float, lookahead: float, spacing: float = 5.0) -> float:
        """Largest heading change per metre over the next ``lookahead`` metres."""
        headings = [pose_along_polyline(self.points, self.cumulative, s + d).heading
                    for d in np.arange(0.0, lookahead + spacing, spacing)]
        turns = [abs(math.remainder(b - a, 2.0 * math.pi)) for a, b in zip(headings, headings[1:])]
        return max(turns, default=0.0) / spacing


def _nearest_obstacle(
    s: float,
    ego: AgentState,
    k: int,
    path: PathFollower,
    obstacles: Sequence[Trajectory],
    lateral_tolerance: float,
) -> Tuple[float, float]:
    """(bumper gap, speed) of the closest agent ahead whose center lies on the path at sub-step ``k``."""
    best_gap, best_speed = NO_LEADER_GAP, 0.0
    for log in obstacles:
        other = log.states[min(k, len(log) - 1)]
        s_other, lateral = path.project(other)
        if lateral > lateral_tolerance or s_other <= s:
            continue
        gap = s_other - s - 0.5 * (ego.box.length + other.box.length)
        if gap < best_gap:
            best_gap, best_speed = gap, other.speed
    return best_gap, best_speed


def follow_path(
    path: PathFollower,
    start: AgentState,
    start_s: float,
    obstacles: Sequence[Trajectory],
    num_states: int,
    dt: float,
    params: ExpertParams,
    wall_s: Optional[float] = None,
    release_time: float = 0.0,
) -> Trajectory:
    """IDM speed profile along ``path``; the stop wall at ``wall_s`` holds until ``release_time``."""
    states = [start]
    s, v = start_s, start.speed
    for k in range(num_states - 1):
        gap, v_lead = _nearest_obstacle(s, states[-1], k, path, obstacles, params.lateral_tolerance)
        if wall_s is not None and k * dt < release_time:
            wall_gap = wall_s - s - 0.5 * start.box.length
            if wall_gap < gap:
                gap, v_lead = wall_gap, 0.0
        idm = params.idm
        kappa = path.curvature_ahead(s, params.curve_lookahead)
        if kappa > 1e-6:
            idm = replace(idm, v0=min(idm.v0, math.sqrt(params.lateral_accel / kappa)))
        v, distance = integrate_speed(v, idm_accel(v, v_lead, gap, idm), dt)
        s += distance
        states.append(path.state_at(s, v, start))
    return Trajectory(tuple(states), dt)


def is_safe(ego: Trajectory, obstacles: Sequence[Trajectory], road_map: RoadMap, margin: float) -> bool:
    """No inflated-box overlap with any logged agent and every ego corner on the road."""
    for k, state in enumerate(ego.states):
        if offroad(state.box, road_map):
            return False
        inflated = OrientedBox(state.pose, state.box.length + 2.0 * margin, state.box.width + margin)
        for log in obstacles:
            if boxes_overlap(inflated, log.states[min(k, len(log) - 1)].box):
                return False
    return True


def release_times(horizon: float, wait_step: float) -> List[float]:
    """Candidate wall release times, earliest first; ``inf`` keeps the wall for the whole horizon."""
    count = int(math.floor(horizon / wait_step + 1e-9))
    return [i * wait_step for i in range(count + 1)] + [math.inf]


def plan_expert(
    road_map: RoadMap,
    route: Route,
    start: AgentState,
    obstacles: Sequence[Trajectory],
    num_states: int,
    dt: float,
    params: ExpertParams = ExpertParams(),
    wall_s: Optional[float] = None,
) -> Optional[Trajectory]:
    """Earliest-release safe expert trajectory, or ``None`` when every release time fails."""
    path = PathFollower(road_map, route)
    start_s, _ = path.project(start)
    horizon = (num_states - 1) * dt
    candidates = release_times(horizon, params.wait_step) if wall_s is not None else [0.0]
    for release in candidates:
        traj = follow_path(path, start, start_s, obstacles, num_states, dt, params, wall_s, release)
        if is_safe(traj, obstacles, road_map, params.safety_margin):
            return traj
    return None
