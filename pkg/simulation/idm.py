"""
Intelligent Driver Model and lane-following leader search for reactive background agents.

IDM agents move along lane centerlines only; at a lane end they continue on the first listed
successor. The ego takes part in the leader search, so IDM agents react to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from models import AgentState, RoadMap

from .scene import LaneAnchor

NO_LEADER_GAP = 1e6
LEADER_SEARCH_DISTANCE = 100.0


@dataclass(frozen=True)
class IdmParams:
    v0: float = 10.0
    T: float = 1.5
    a_max: float = 2.0
    b: float = 2.0
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self) -> None:
        for name in ("v0", "T", "a_max", "b", "s0", "delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")

    @property
    def emergency_decel(self) -> float:
        return 2.0 * self.b


def idm_accel(v: float, v_lead: float, gap: float, p: IdmParams) -> float:
    """IDM acceleration clamped to ``[-2b, a_max]``; ``gap <= 0`` means the boxes already overlap."""
    if gap <= 0.0:
        return -p.emergency_decel
    desired = p.s0 + max(0.0, v * p.T + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b)))
    accel = p.a_max * (1.0 - (v / p.v0) ** p.delta - (desired / gap) ** 2)
    return min(max(accel, -p.emergency_decel), p.a_max)


def integrate_speed(v: float, accel: float, dt: float) -> Tuple[float, float]:
    """One explicit step: returns ``(new_speed, distance_travelled)``; speed never drops below zero."""
    new_v = max(0.0, v + accel * dt)
    if accel < 0.0 and v + accel * dt < 0.0:
        # stopped inside the interval
        return 0.0, v * v / (-2.0 * accel)
    return new_v, 0.5 * (v + new_v) * dt


def anchor_for(state: AgentState, road_map: RoadMap) -> LaneAnchor:
    lane, s, _ = road_map.nearest_lane(state.pose.x, state.pose.y)
    return LaneAnchor(lane.lane_id, s)


def advance_anchor(anchor: LaneAnchor, distance: float, road_map: RoadMap) -> LaneAnchor:
    """Move ``distance`` metres along the lane graph, taking the first successor at each lane end."""
    lane = road_map.lane(anchor.lane_id)
    s = anchor.s + distance
    while s > lane.length:
        successors = road_map.successors_of(lane.lane_id)
        if not successors:
            break
        s -= lane.length
        lane = road_map.lane(successors[0])
    return LaneAnchor(lane.lane_id, s)


def _distances_ahead(start: str, road_map: RoadMap, limit: float) -> Dict[str, float]:
    """Arc-length offset of every lane reachable from ``start`` (offset of its s=0), within ``limit``."""
    offsets: Dict[str, float] = {start: 0.0}
    frontier: List[str] = [start]
    while frontier:
        lane_id = frontier.pop(0)
        end = offsets[lane_id] + road_map.lane(lane_id).length
        if end > limit:
            continue
        for succ in road_map.successors_of(lane_id):
            if succ not in offsets or end < offsets[succ]:
                offsets[succ] = end
                frontier.append(succ)
    return offsets


def leader_of(
    index: int,
    states: Sequence[AgentState],
    anchors: Sequence[Optional[LaneAnchor]],
    road_map: RoadMap,
    max_distance: float = LEADER_SEARCH_DISTANCE,
) -> Optional[Tuple[int, float]]:
    """Nearest agent ahead on the same or a successor lane within ``max_distance``.

    Returns ``(leader_index, bumper_gap)`` where ``gap = ds - (L_self + L_leader) / 2``, or ``None``.
    Agents without an anchor are assigned to their nearest centerline.
    """
    resolved = [a if a is not None else anchor_for(s, road_map) for a, s in zip(anchors, states)]
    own = resolved[index]
    offsets = _distances_ahead(own.lane_id, road_map, own.s + max_distance)
    best: Optional[Tuple[int, float]] = None
    best_ds = math.inf
    for j, other in enumerate(resolved):
        if j == index or other.lane_id not in offsets:
            continue
        ds = offsets[other.lane_id] + other.s - own.s
        if ds <= 0.0 or ds > max_distance:
            continue
        if ds < best_ds:
            best_ds = ds
            gap = ds - 0.5 * (states[index].box.length + states[j].box.length)
            best = (j, gap)
    return best
