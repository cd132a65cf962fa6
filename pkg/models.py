"""
Domain models for the correction planner: poses, boxes, agents, lanes, routes and scenarios.

Frozen value objects with validation in ``__post_init__`` and JSON helpers (``to_dict`` / ``from_dict``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np


SCENARIO_FORMAT_VERSION = 1
DEFAULT_DT = 0.1
DEFAULT_SUBSTEPS = 5
CANONICAL_LENGTH = 4.7
CANONICAL_WIDTH = 2.1


class PlannerError(Exception):
    """Base class for every error raised by the planner code base."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.details: Dict[str, Any] = dict(details or {})


class InvalidScenarioError(PlannerError):
    pass


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    """Planar pose in meters / radians; heading is kept in (-pi, pi]."""
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    def to_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.heading)

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle of ``length`` x ``width`` centered on ``center`` and aligned with its heading."""
    center: Pose2D
    length: float = CANONICAL_LENGTH
    width: float = CANONICAL_WIDTH

    def __post_init__(self) -> None:
        if not (self.width > 0.0 and self.length >= self.width):
            raise ValueError(f"Box needs length >= width > 0, got {self.length} x {self.width}")

    def corners(self) -> List[Tuple[float, float]]:
        """Corners in counter-clockwise order starting front-left."""
        c, s = math.cos(self.center.heading), math.sin(self.center.heading)
        hl, hw = self.length / 2.0, self.width / 2.0
        out = []
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            out.append((self.center.x + c * dx - s * dy, self.center.y + s * dx + c * dy))
        return out


@dataclass(frozen=True)
class AgentState:
    """Kinematic state of one vehicle. The box always travels with the pose."""
    pose: Pose2D
    speed: float
    box: OrientedBox

    def __post_init__(self) -> None:
        if not math.isfinite(self.speed) or self.speed < 0.0:
            raise ValueError(f"Speed must be finite and non-negative, got {self.speed}")
        if self.box.center != self.pose:
            raise ValueError("Box center must equal the agent pose")

    @staticmethod
    def make(
        x: float,
        y: float,
        heading: float,
        speed: float,
        length: float = CANONICAL_LENGTH,
        width: float = CANONICAL_WIDTH,
    ) -> "AgentState":
        pose = Pose2D(x, y, heading)
        return AgentState(pose=pose, speed=float(speed), box=OrientedBox(pose, length, width))

    def moved(self, pose: Pose2D, speed: float) -> "AgentState":
        """Same vehicle at a new pose and speed."""
        return AgentState(
            pose=pose,
            speed=max(0.0, float(speed)),
            box=OrientedBox(pose, self.box.length, self.box.width),
        )

    def to_list(self) -> List[float]:
        return [self.pose.x, self.pose.y, self.pose.heading, self.speed]

    @staticmethod
    def from_list(values: Sequence[float], dims: Sequence[float]) -> "AgentState":
        x, y, heading, speed = (float(v) for v in values[:4])
        return AgentState.make(x, y, heading, speed, float(dims[0]), float(dims[1]))


@dataclass(frozen=True)
class LanePolyline:
    """Lane centerline with a constant width."""
    lane_id: str
    points: Tuple[Tuple[float, float], ...]
    width: float = 3.5

    def __post_init__(self) -> None:
        pts = tuple((float(x), float(y)) for x, y in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise InvalidScenarioError(f"Lane {self.lane_id} needs at least two points")
        if self.width <= 0.0:
            raise InvalidScenarioError(f"Lane {self.lane_id} width must be positive")
        for a, b in zip(pts, pts[1:]):
            if a == b:
                raise InvalidScenarioError(f"Lane {self.lane_id} has repeated consecutive points")

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    @cached_property
    def cumulative(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.array, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def project(self, x: float, y: float) -> Tuple[float, float]:
        """Arc length of the closest centerline point and the distance to it."""
        return project_onto_polyline(self.array, self.cumulative, x, y)

    def pose_at(self, s: float) -> Pose2D:
        """Pose on the centerline at arc length ``s`` (extrapolated past both ends)."""
        return pose_along_polyline(self.array, self.cumulative, s)

    def sample(self, spacing: float) -> np.ndarray:
        """Resampled points (x, y, heading) every ``spacing`` meters, endpoints included."""
        count = max(2, int(math.floor(self.length / spacing)) + 1)
        out = []
        for s in np.linspace(0.0, self.length, count):
            pose = self.pose_at(float(s))
            out.append((pose.x, pose.y, pose.heading))
        return np.asarray(out, dtype=float)

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.lane_id, "width": self.width, "points": [list(p) for p in self.points]}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "LanePolyline":
        return LanePolyline(
            lane_id=str(data["id"]),
            points=tuple(tuple(p) for p in data.get("points", [])),
            width=float(data.get("width", 3.5)),
        )


def project_onto_polyline(points: np.ndarray, cumulative: np.ndarray, x: float, y: float) -> Tuple[float, float]:
    """Closest-point projection onto a polyline; zero-length segments are skipped."""
    starts = points[:-1]
    deltas = points[1:] - starts
    lengths_sq = np.einsum("ij,ij->i", deltas, deltas)
    valid = lengths_sq > 0.0
    if not np.any(valid):
        return 0.0, float(math.hypot(x - points[0, 0], y - points[0, 1]))
    rel = np.array([x, y]) - starts
    t = np.zeros(len(starts))
    t[valid] = np.clip(np.einsum("ij,ij->i", rel[valid], deltas[valid]) / lengths_sq[valid], 0.0, 1.0)
    closest = starts + deltas * t[:, None]
    dist = np.linalg.norm(closest - np.array([x, y]), axis=1)
    dist[~valid] = np.inf
    best = int(np.argmin(dist))
    seg_len = math.sqrt(lengths_sq[best])
    return float(cumulative[best] + t[best] * seg_len), float(dist[best])


def pose_along_polyline(points: np.ndarray, cumulative: np.ndarray, s: float) -> Pose2D:
    idx = int(np.searchsorted(cumulative, s, side="right") - 1)
    idx = min(max(idx, 0), len(points) - 2)
    # skip zero-length segments so the heading is defined
    while idx > 0 and cumulative[idx + 1] - cumulative[idx] <= 0.0:
        idx -= 1
    a, b = points[idx], points[idx + 1]
    seg = cumulative[idx + 1] - cumulative[idx]
    t = (s - cumulative[idx]) / seg if seg > 0.0 else 0.0
    heading = math.atan2(b[1] - a[1], b[0] - a[0])
    return Pose2D(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), heading)


@dataclass(frozen=True)
class RoadMap:
    """Lanes plus the lane graph. Successor lists are ordered: the straight continuation comes first."""
    lanes: Tuple[LanePolyline, ...]
    successors: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "successors", {k: tuple(v) for k, v in self.successors.items()})
        ids = [lane.lane_id for lane in self.lanes]
        if len(set(ids)) != len(ids):
            raise InvalidScenarioError("Lane ids must be unique")
        known = set(ids)
        for src, dsts in self.successors.items():
            missing = [d for d in (src, *dsts) if d not in known]
            if missing:
                raise InvalidScenarioError(f"Successor references unknown lanes: {missing}")

    @cached_property
    def by_id(self) -> Dict[str, LanePolyline]:
        return {lane.lane_id: lane for lane in self.lanes}

    def lane(self, lane_id: str) -> LanePolyline:
        try:
            return self.by_id[lane_id]
        except KeyError:
            raise InvalidScenarioError(f"Unknown lane: {lane_id}") from None

    def successors_of(self, lane_id: str) -> Tuple[str, ...]:
        return self.successors.get(lane_id, ())

    def nearest_lane(self, x: float, y: float) -> Tuple[LanePolyline, float, float]:
        """(lane, arc length, distance) of the closest centerline; ties go to the earlier lane."""
        best: Optional[Tuple[LanePolyline, float, float]] = None
        for lane in self.lanes:
            s, dist = lane.project(x, y)
            if best is None or dist < best[2]:
                best = (lane, s, dist)
        assert best is not None
        return best

    @cached_property
    def sampled_points(self) -> np.ndarray:
        """Map points (x, y, heading) every 2 m over all lanes, lane order preserved."""
        return np.concatenate([lane.sample(2.0) for lane in self.lanes], axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lanes": [lane.to_dict() for lane in self.lanes],
            "successors": {k: list(v) for k, v in sorted(self.successors.items())},
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RoadMap":
        lanes = tuple(LanePolyline.from_dict(raw) for raw in data.get("lanes", []) or [])
        if not lanes:
            raise InvalidScenarioError("Map needs at least one lane")
        successors = {str(k): tuple(str(v) for v in vs) for k, vs in (data.get("successors") or {}).items()}
        return RoadMap(lanes=lanes, successors=successors)


@dataclass(frozen=True)
class Route:
    """Ordered lane ids; every consecutive pair must be linked in the lane graph."""
    lane_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lane_ids", tuple(self.lane_ids))
        if not self.lane_ids:
            raise InvalidScenarioError("Route must contain at least one lane")

    def validate(self, road_map: RoadMap) -> None:
        for lane_id in self.lane_ids:
            road_map.lane(lane_id)
        for a, b in zip(self.lane_ids, self.lane_ids[1:]):
            if b not in road_map.successors_of(a):
                raise InvalidScenarioError(f"Route lanes {a} -> {b} are not connected")

    def centerline(self, road_map: RoadMap) -> np.ndarray:
        """Concatenated centerline points of the route (duplicate joints removed)."""
        pts: List[Tuple[float, float]] = []
        for lane_id in self.lane_ids:
            for p in road_map.lane(lane_id).points:
                if not pts or math.hypot(p[0] - pts[-1][0], p[1] - pts[-1][1]) > 1e-9:
                    pts.append(p)
        return np.asarray(pts, dtype=float)


@dataclass(frozen=True)
class Trajectory:
    """States at a fixed sub-step ``dt``."""
    states: Tuple[AgentState, ...]
    dt: float = DEFAULT_DT

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(self.states))
        if not self.states:
            raise InvalidScenarioError("Trajectory must contain at least one state")
        if self.dt <= 0.0:
            raise InvalidScenarioError("Trajectory dt must be positive")

    def __len__(self) -> int:
        return len(self.states)

    @cached_property
    def positions(self) -> np.ndarray:
        return np.asarray([(s.pose.x, s.pose.y) for s in self.states], dtype=float)

    def to_list(self) -> List[List[float]]:
        return [s.to_list() for s in self.states]

    @staticmethod
    def from_list(rows: Sequence[Sequence[float]], dims: Sequence[float], dt: float) -> "Trajectory":
        return Trajectory(states=tuple(AgentState.from_list(r, dims) for r in rows), dt=dt)


@dataclass(frozen=True)
class Scenario:
    """One closed-loop test case: map, route, initial states and the logged futures."""
    map: RoadMap
    route: Route
    ego_init: AgentState
    agents_init: Tuple[AgentState, ...]
    expert: Trajectory
    agent_logs: Tuple[Trajectory, ...]
    horizon_tokens: int
    seed: int = 0
    substeps_per_token: int = DEFAULT_SUBSTEPS
    archetype: str = ""
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents_init", tuple(self.agents_init))
        object.__setattr__(self, "agent_logs", tuple(self.agent_logs))
        if self.horizon_tokens < 1:
            raise InvalidScenarioError("horizon_tokens must be >= 1")
        needed = self.horizon_tokens * self.substeps_per_token + 1
        if len(self.expert) < needed:
            raise InvalidScenarioError(f"Expert covers {len(self.expert)} states, {needed} needed")
        if len(self.agent_logs) != len(self.agents_init):
            raise InvalidScenarioError("Every agent needs a log")
        for idx, log in enumerate(self.agent_logs):
            if len(log) < needed:
                raise InvalidScenarioError(f"Agent {idx} log covers {len(log)} states, {needed} needed")
        if self.expert.states[0] != self.ego_init:
            raise InvalidScenarioError("ego_init must equal the first expert state")
        self.route.validate(self.map)

    @property
    def dt(self) -> float:
        return self.expert.dt

    @property
    def num_agents(self) -> int:
        return len(self.agents_init)

    def to_dict(self) -> Dict[str, Any]:
        """Serialize with the file header (format version, dt, sub-steps) first."""
        return {
            "format_version": SCENARIO_FORMAT_VERSION,
            "dt": self.dt,
            "substeps_per_token": self.substeps_per_token,
            "name": self.name,
            "archetype": self.archetype,
            "seed": self.seed,
            "horizon_tokens": self.horizon_tokens,
            "map": self.map.to_dict(),
            "route": list(self.route.lane_ids),
            "ego_box": [self.ego_init.box.length, self.ego_init.box.width],
            "ego_init": self.ego_init.to_list(),
            "agent_boxes": [[a.box.length, a.box.width] for a in self.agents_init],
            "agents_init": [a.to_list() for a in self.agents_init],
            "expert": self.expert.to_list(),
            "agent_logs": [log.to_list() for log in self.agent_logs],
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "Scenario":
        try:
            dt = float(data.get("dt", DEFAULT_DT))
            ego_box = data.get("ego_box", [CANONICAL_LENGTH, CANONICAL_WIDTH])
            agent_boxes = data.get("agent_boxes") or [[CANONICAL_LENGTH, CANONICAL_WIDTH]] * len(
                data.get("agents_init", [])
            )
            return Scenario(
                map=RoadMap.from_dict(data["map"]),
                route=Route(tuple(str(r) for r in data["route"])),
                ego_init=AgentState.from_list(data["ego_init"], ego_box),
                agents_init=tuple(
                    AgentState.from_list(row, dims) for row, dims in zip(data.get("agents_init", []), agent_boxes)
                ),
                expert=Trajectory.from_list(data["expert"], ego_box, dt),
                agent_logs=tuple(
                    Trajectory.from_list(rows, dims, dt) for rows, dims in zip(data.get("agent_logs", []), agent_boxes)
                ),
                horizon_tokens=int(data["horizon_tokens"]),
                seed=int(data.get("seed", 0)),
                substeps_per_token=int(data.get("substeps_per_token", DEFAULT_SUBSTEPS)),
                archetype=str(data.get("archetype", "")),
                name=str(data.get("name", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenarioError(f"Malformed scenario document: {exc}") from exc
