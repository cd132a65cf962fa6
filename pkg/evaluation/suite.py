"""
Synthetic conflict-scenario suite.

Five archetypes: ``unprotected_left``, ``lane_change``, ``lead_brake``, ``crossing`` and ``merge``.
Background agents follow scripted logs along their lanes, timed so that they reach the conflict zone
close to the moment the ego would arrive there in free flow. The expert comes from
:func:`evaluation.expert.plan_expert`; a draw whose expert cannot be made safe is re-sampled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from geometry import path_arc_length
from models import (
    DEFAULT_DT,
    DEFAULT_SUBSTEPS,
    AgentState,
    LanePolyline,
    PlannerError,
    RoadMap,
    Route,
    Scenario,
    Trajectory,
    pose_along_polyline,
)
from scenario_store import save_suite
from simulation.idm import integrate_speed

from .expert import ExpertParams, PathFollower, plan_expert

ARCHETYPES = ("unprotected_left", "lane_change", "lead_brake", "crossing", "merge")
SUITE_FORMAT_VERSION = 1
MAX_ATTEMPTS = 20
LANE_WIDTH = 3.5


class SuiteGenerationError(PlannerError):
    pass


Range = Tuple[float, float]


@dataclass(frozen=True)
class SuiteSpec:
    """Scenario counts per archetype plus the randomization ranges."""
    counts: Dict[str, int] = field(default_factory=lambda: {name: 40 for name in ARCHETYPES})
    seed: int = 0
    horizon_tokens: int = 16
    ego_speed: Range = (6.0, 10.0)
    agent_speed: Range = (6.0, 10.0)
    lead_gap: Range = (15.0, 30.0)
    brake_time: Range = (1.0, 4.0)
    brake_decel: Range = (2.0, 4.0)
    arrival_offset: Range = (-2.0, 2.0)
    approach_time: Range = (2.5, 4.5)

    def __post_init__(self) -> None:
        unknown = set(self.counts) - set(ARCHETYPES)
        if unknown:
            raise ValueError(f"Unknown archetypes: {sorted(unknown)}")
        if any(int(c) < 0 for c in self.counts.values()):
            raise ValueError("Archetype counts must be >= 0")
        if self.horizon_tokens < 1:
            raise ValueError("horizon_tokens must be >= 1")
        for name in ("ego_speed", "agent_speed", "lead_gap", "brake_time", "brake_decel", "arrival_offset",
                     "approach_time"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range must satisfy low <= high")
            object.__setattr__(self, name, (float(lo), float(hi)))
        for name in ("ego_speed", "agent_speed", "lead_gap", "brake_decel", "approach_time"):
            if getattr(self, name)[0] <= 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "counts", {name: int(self.counts.get(name, 0)) for name in ARCHETYPES})

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @staticmethod
    def from_dict(data: Dict) -> "SuiteSpec":
        known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()
                 if k in SuiteSpec.__dataclass_fields__}
        return SuiteSpec(**known)


@dataclass(frozen=True)
class AgentScript:
    """Logged behaviour of one background agent: constant speed along lanes, optionally braking to a stop."""
    lanes: Tuple[str, ...]
    start_s: float
    speed: float
    brake_at: Optional[float] = None
    decel: float = 0.0


@dataclass(frozen=True)
class Layout:
    """One drawn scenario before the expert is planned."""
    road_map: RoadMap
    route: Route
    ego_start_s: float
    ego_speed: float
    agents: Tuple[AgentScript, ...]
    wall_s: Optional[float] = None


def _straight(lane_id: str, start: Tuple[float, float], end: Tuple[float, float]) -> LanePolyline:
    return LanePolyline(lane_id, (start, end), LANE_WIDTH)


def _arc(lane_id: str, center: Tuple[float, float], radius: float, a0: float, a1: float, n: int = 16) -> LanePolyline:
    angles = np.linspace(a0, a1, n)
    pts = tuple((center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)) for a in angles)
    return LanePolyline(lane_id, pts, LANE_WIDTH)


def _uniform(rng: np.random.Generator, bounds: Range) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _path_s(road_map: RoadMap, lanes: Sequence[str], x: float, y: float) -> float:
    return PathFollower(road_map, Route(tuple(lanes))).project(AgentState.make(x, y, 0.0, 0.0))[0]


def _timed_agent(
    road_map: RoadMap,
    lanes: Tuple[str, ...],
    conflict: Tuple[float, float],
    arrival: float,
    speed: float,
) -> AgentScript:
    """Constant-speed agent that passes ``conflict`` at time ``arrival`` (never earlier than 0.5 s)."""
    s_conflict = _path_s(road_map, lanes, *conflict)
    return AgentScript(lanes, s_conflict - speed * max(0.5, arrival), speed)


def _ego_start(conflict_s: float, wall_s: float, speed: float, approach: float) -> Tuple[float, float]:
    """Ego start arc length (``approach`` seconds before the wall) and its free-flow arrival at the conflict."""
    start_s = max(10.0, wall_s - speed * approach)
    return start_s, (conflict_s - start_s) / speed


def layout_lead_brake(rng: np.random.Generator, spec: SuiteSpec) -> Layout:
    road_map = RoadMap(
        (_straight("E", (0.0, 0.0), (250.0, 0.0)), _straight("W", (250.0, LANE_WIDTH), (0.0, LANE_WIDTH))),
        {},
    )
    ego_speed = _uniform(rng, spec.ego_speed)
    lead = AgentScript(
        ("E",),
        10.0 + _uniform(rng, spec.lead_gap),
        _uniform(rng, spec.agent_speed),
        brake_at=_uniform(rng, spec.brake_time),
        decel=_uniform(rng, spec.brake_decel),
    )
    oncoming = AgentScript(("W",), _uniform(rng, (60.0, 160.0)), _uniform(rng, spec.agent_speed))
    return Layout(road_map, Route(("E",)), 10.0, ego_speed, (lead, oncoming))


def layout_lane_change(rng: np.random.Generator, spec: SuiteSpec) -> Layout:
    road_map = RoadMap(
        (
            _straight("A1", (-100.0, 0.0), (60.0, 0.0)),
            _straight("A2", (60.0, 0.0), (250.0, 0.0)),
            _straight("B1", (-100.0, LANE_WIDTH), (80.0, LANE_WIDTH)),
            _straight("B2", (80.0, LANE_WIDTH), (250.0, LANE_WIDTH)),
            _straight("C", (60.0, 0.0), (80.0, LANE_WIDTH)),
        ),
        {"A1": ("A2", "C"), "C": ("B2",), "B1": ("B2",)},
    )
    route = Route(("A1", "C", "B2"))
    ego_speed = _uniform(rng, spec.ego_speed)
    wall_s = _path_s(road_map, route.lane_ids, 58.0, 0.0)
    conflict_s = _path_s(road_map, route.lane_ids, 72.0, 2.1)
    start_s, arrival = _ego_start(conflict_s, wall_s, ego_speed, _uniform(rng, spec.approach_time))
    agent = _timed_agent(
        road_map, ("B1", "B2"), (72.0, LANE_WIDTH), arrival + _uniform(rng, spec.arrival_offset),
        _uniform(rng, spec.agent_speed),
    )
    return Layout(road_map, route, start_s, ego_speed, (agent,), wall_s)


def layout_unprotected_left(rng: np.random.Generator, spec: SuiteSpec) -> Layout:
    half = LANE_WIDTH / 2.0
    radius = 10.0 + half
    road_map = RoadMap(
        (
            _straight("S_in", (half, -100.0), (half, -10.0)),
            _straight("S_out", (half, -10.0), (half, 100.0)),
            _arc("L", (-10.0, -10.0), radius, 0.0, math.pi / 2.0),
            _straight("W_out", (-10.0, half), (-120.0, half)),
            _straight("O", (-half, 100.0), (-half, -100.0)),
        ),
        {"S_in": ("S_out", "L"), "L": ("W_out",)},
    )
    route = Route(("S_in", "L", "W_out"))
    ego_speed = _uniform(rng, spec.ego_speed)
    wall_s = _path_s(road_map, route.lane_ids, half, -10.0)
    phi = math.acos((10.0 - half) / radius)
    conflict = (-half, -10.0 + radius * math.sin(phi))
    conflict_s = _path_s(road_map, route.lane_ids, *conflict)
    start_s, arrival = _ego_start(conflict_s, wall_s, ego_speed, _uniform(rng, spec.approach_time))
    oncoming = _timed_agent(
        road_map, ("O",), conflict, arrival + _uniform(rng, spec.arrival_offset), _uniform(rng, spec.agent_speed)
    )
    return Layout(road_map, route, start_s, ego_speed, (oncoming,), wall_s)


def layout_crossing(rng: np.random.Generator, spec: SuiteSpec) -> Layout:
    half = LANE_WIDTH / 2.0
    road_map = RoadMap(
        (
            _straight("N", (half, -100.0), (half, 150.0)),
            _straight("X", (-100.0, -half), (150.0, -half)),
        ),
        {},
    )
    route = Route(("N",))
    ego_speed = _uniform(rng, spec.ego_speed)
    wall_s = _path_s(road_map, route.lane_ids, half, -6.0)
    conflict_s = _path_s(road_map, route.lane_ids, half, -half)
    start_s, arrival = _ego_start(conflict_s, wall_s, ego_speed, _uniform(rng, spec.approach_time))
    crossing = _timed_agent(
        road_map, ("X",), (half, -half), arrival + _uniform(rng, spec.arrival_offset), _uniform(rng, spec.agent_speed)
    )
    return Layout(road_map, route, start_s, ego_speed, (crossing,), wall_s)


def layout_merge(rng: np.random.Generator, spec: SuiteSpec) -> Layout:
    road_map = RoadMap(
        (
            _straight("M1", (-100.0, 0.0), (60.0, 0.0)),
            _straight("M2", (60.0, 0.0), (250.0, 0.0)),
            _straight("R0", (-100.0, -7.0), (0.0, -7.0)),
            _straight("R1", (0.0, -7.0), (60.0, 0.0)),
        ),
        {"M1": ("M2",), "R0": ("R1",), "R1": ("M2",)},
    )
    route = Route(("R0", "R1", "M2"))
    ego_speed = _uniform(rng, spec.ego_speed)
    wall_s = _path_s(road_map, route.lane_ids, 39.0, -7.0 + 7.0 * 39.0 / 60.0)
    conflict_s = _path_s(road_map, route.lane_ids, 51.0, -7.0 + 7.0 * 51.0 / 60.0)
    start_s, arrival = _ego_start(conflict_s, wall_s, ego_speed, _uniform(rng, spec.approach_time))
    main = _timed_agent(
        road_map, ("M1", "M2"), (51.0, 0.0), arrival + _uniform(rng, spec.arrival_offset),
        _uniform(rng, spec.agent_speed),
    )
    return Layout(road_map, route, start_s, ego_speed, (main,), wall_s)


LAYOUTS: Dict[str, Callable[[np.random.Generator, SuiteSpec], Layout]] = {
    "unprotected_left": layout_unprotected_left,
    "lane_change": layout_lane_change,
    "lead_brake": layout_lead_brake,
    "crossing": layout_crossing,
    "merge": layout_merge,
}


def script_log(road_map: RoadMap, script: AgentScript, num_states: int, dt: float) -> Trajectory:
    """Sub-step states of a scripted agent; headings follow its lane path."""
    points = Route(script.lanes).centerline(road_map)
    cumulative = path_arc_length(points)
    template = AgentState.make(0.0, 0.0, 0.0, script.speed)
    states = []
    s, v = script.start_s, script.speed
    for k in range(num_states):
        states.append(template.moved(pose_along_polyline(points, cumulative, s), v))
        accel = -script.decel if script.brake_at is not None and k * dt >= script.brake_at else 0.0
        v, distance = integrate_speed(v, accel, dt)
        s += distance
    return Trajectory(tuple(states), dt)


def build_scenario(
    archetype: str,
    index: int,
    spec: SuiteSpec,
    dt: float = DEFAULT_DT,
    substeps: int = DEFAULT_SUBSTEPS,
    params: ExpertParams = ExpertParams(),
) -> Scenario:
    """Draw layouts until the expert is safe; raises :class:`SuiteGenerationError` after the retry budget."""
    if archetype not in LAYOUTS:
        raise SuiteGenerationError(f"Unknown archetype: {archetype}", {"archetype": archetype})
    seed_seq = np.random.SeedSequence([spec.seed, ARCHETYPES.index(archetype), index])
    scenario_seed = int(seed_seq.generate_state(1)[0])
    rng = np.random.default_rng(seed_seq)
    num_states = spec.horizon_tokens * substeps + 1
    for _ in range(MAX_ATTEMPTS):
        layout = LAYOUTS[archetype](rng, spec)
        logs = tuple(script_log(layout.road_map, a, num_states, dt) for a in layout.agents)
        path = PathFollower(layout.road_map, layout.route)
        start = path.state_at(layout.ego_start_s, layout.ego_speed, AgentState.make(0.0, 0.0, 0.0, 0.0))
        expert = plan_expert(layout.road_map, layout.route, start, logs, num_states, dt, params, layout.wall_s)
        if expert is None or path_arc_length(expert.positions)[-1] < 1.0:
            continue
        return Scenario(
            map=layout.road_map,
            route=layout.route,
            ego_init=expert.states[0],
            agents_init=tuple(log.states[0] for log in logs),
            expert=expert,
            agent_logs=logs,
            horizon_tokens=spec.horizon_tokens,
            seed=scenario_seed,
            substeps_per_token=substeps,
            archetype=archetype,
            name=f"{archetype}_{index:03d}",
        )
    raise SuiteGenerationError(
        f"No safe expert for {archetype} #{index} after {MAX_ATTEMPTS} draws",
        {"archetype": archetype, "index": index, "seed": spec.seed},
    )


def generate_suite(
    spec: SuiteSpec,
    out_dir: Optional[Path] = None,
    on_log: Optional[Callable[[str], None]] = None,
) -> List[Scenario]:
    """Every scenario of ``spec`` in archetype order; written to ``out_dir`` with a manifest when given."""
    scenarios: List[Scenario] = []
    for archetype in ARCHETYPES:
        for i in range(spec.counts[archetype]):
            scenarios.append(build_scenario(archetype, i, spec))
        if on_log and spec.counts[archetype]:
            on_log(f"Generated {spec.counts[archetype]} {archetype} scenarios")
    if out_dir is not None:
        meta = {"format_version": SUITE_FORMAT_VERSION, "seed": spec.seed, "counts": spec.counts,
                "spec": spec.to_dict()}
        save_suite(scenarios, Path(out_dir), meta)
    return scenarios
