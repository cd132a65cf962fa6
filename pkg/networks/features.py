"""
Fixed-size, frame-relative feature layouts for the world model, the ego policy and the critic.

Everything is expressed in the observing agent's frame, so rigidly moving the whole scene leaves the
features unchanged. Sets are padded to a fixed size and carry a validity mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from geometry import points_to_frame, to_frame
from models import AgentState, Pose2D, RoadMap, Route, pose_along_polyline, project_onto_polyline
from simulation.scene import SceneState
from tokenizer import TokenVocabulary

POSITION_SCALE = 20.0
SPEED_SCALE = 10.0
NEIGHBOR_RADIUS = 60.0
MAP_RADIUS = 30.0
ROUTE_SPACING = 4.0

NEIGHBOR_FEATURES = 5  # x, y, cos, sin, speed
MAP_FEATURES = 4  # x, y, cos, sin
CRITIC_NEIGHBOR_FEATURES = 7  # x, y, cos, sin, speed, vx_rel, vy_rel


@dataclass(frozen=True)
class FeatureDims:
    history: int = 4
    neighbors: int = 8
    map_points: int = 16
    route_points: int = 16
    trail_poses: int = 20
    substeps: int = 5

    @property
    def critic_width(self) -> int:
        return (
            self.trail_poses * 4
            + self.substeps * 4
            + 1
            + self.neighbors * CRITIC_NEIGHBOR_FEATURES
            + self.neighbors
        )


@dataclass(frozen=True)
class AgentContext:
    history: np.ndarray  # (T_h,) token ids, pad id for missing
    kinematics: np.ndarray  # (2,) speed, heading rate
    neighbors: np.ndarray  # (K_n, 5)
    neighbor_mask: np.ndarray  # (K_n,)
    neighbor_ids: Tuple[int, ...]  # scene indices of the valid neighbor rows
    map_points: np.ndarray  # (M_p, 4)
    map_mask: np.ndarray  # (M_p,)


@dataclass(frozen=True)
class EgoContext:
    agent: AgentContext
    route: np.ndarray  # (R_p, 4)
    route_mask: np.ndarray
    predicted: np.ndarray  # (K_n, 5)
    predicted_mask: np.ndarray
    trace: Tuple[int, ...] = ()
    step: int = 0

    def with_trace(self, trace: Sequence[int]) -> "EgoContext":
        return replace(self, trace=tuple(int(t) for t in trace))


def _relative_row(other: AgentState, ref: AgentState) -> List[float]:
    rel = to_frame(other.pose, ref.pose)
    return [rel.x / POSITION_SCALE, rel.y / POSITION_SCALE, math.cos(rel.heading), math.sin(rel.heading),
            other.speed / SPEED_SCALE]


def nearest_indices(distances: np.ndarray, radius: float, count: int) -> np.ndarray:
    """Indices of the ``count`` closest entries within ``radius``; ties go to the lower index."""
    order = np.lexsort((np.arange(len(distances)), distances))
    return np.array([i for i in order if distances[i] <= radius][:count], dtype=np.int64)


def heading_rate(history: Sequence[int], vocab: TokenVocabulary, dt: float) -> float:
    last = history[-1] if history else vocab.pad_id
    if last == vocab.pad_id:
        return 0.0
    return float(vocab.end_poses[last][2]) / (vocab.substeps * dt)


def build_agent_context(
    scene: SceneState,
    agent: int,
    road_map: RoadMap,
    vocab: TokenVocabulary,
    dt: float,
    dims: FeatureDims = FeatureDims(),
) -> AgentContext:
    """Fixed-size features of ``agent``: own history and kinematics, nearest neighbors, nearest map points."""
    me = scene.agents[agent]
    others = [j for j in range(scene.num_agents) if j != agent]
    neighbors = np.zeros((dims.neighbors, NEIGHBOR_FEATURES))
    neighbor_mask = np.zeros(dims.neighbors)
    ids: List[int] = []
    if others:
        dist = np.array([me.pose.distance_to(scene.agents[j].pose) for j in others])
        for row, k in enumerate(nearest_indices(dist, NEIGHBOR_RADIUS, dims.neighbors)):
            neighbors[row] = _relative_row(scene.agents[others[k]], me)
            neighbor_mask[row] = 1.0
            ids.append(others[k])

    map_points = np.zeros((dims.map_points, MAP_FEATURES))
    map_mask = np.zeros(dims.map_points)
    samples = road_map.sampled_points
    dist = np.hypot(samples[:, 0] - me.pose.x, samples[:, 1] - me.pose.y)
    chosen = nearest_indices(dist, MAP_RADIUS, dims.map_points)
    if len(chosen):
        rel_xy = points_to_frame(samples[chosen, :2], me.pose)
        rel_h = samples[chosen, 2] - me.pose.heading
        map_points[: len(chosen)] = np.column_stack(
            [rel_xy / POSITION_SCALE, np.cos(rel_h), np.sin(rel_h)]
        )
        map_mask[: len(chosen)] = 1.0

    history = scene.histories[agent][-dims.history:]
    return AgentContext(
        history=np.asarray(history, dtype=np.int64),
        kinematics=np.array([me.speed / SPEED_SCALE, heading_rate(history, vocab, dt)]),
        neighbors=neighbors,
        neighbor_mask=neighbor_mask,
        neighbor_ids=tuple(ids),
        map_points=map_points,
        map_mask=map_mask,
    )


def route_points(ego: AgentState, route_line: np.ndarray, count: int, spacing: float = ROUTE_SPACING) -> Tuple[np.ndarray, np.ndarray]:
    """``count`` route centerline points ahead of the ego's projection, in the ego frame."""
    cumulative = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(route_line, axis=0).T))])
    s0, _ = project_onto_polyline(route_line, cumulative, ego.pose.x, ego.pose.y)
    out = np.zeros((count, MAP_FEATURES))
    mask = np.zeros(count)
    for i in range(count):
        s = s0 + spacing * (i + 1)
        if s > cumulative[-1]:
            break
        rel = to_frame(pose_along_polyline(route_line, cumulative, s), ego.pose)
        out[i] = [rel.x / POSITION_SCALE, rel.y / POSITION_SCALE, math.cos(rel.heading), math.sin(rel.heading)]
        mask[i] = 1.0
    return out, mask


def build_ego_context(
    scene: SceneState,
    road_map: RoadMap,
    route: Route,
    vocab: TokenVocabulary,
    dt: float,
    predicted: Optional[Dict[int, AgentState]] = None,
    trace: Sequence[int] = (),
    dims: FeatureDims = FeatureDims(),
) -> EgoContext:
    """Ego features plus route points and the predicted next states of the ego's neighbors.

    Args:
        predicted: next end-state per scene index (world-model argmax during rollouts, the logged
            future during imitation); neighbors without an entry are padding.
    """
    agent = build_agent_context(scene, 0, road_map, vocab, dt, dims)
    route_feat, route_mask = route_points(scene.ego, route.centerline(road_map), dims.route_points)
    pred = np.zeros((dims.neighbors, NEIGHBOR_FEATURES))
    pred_mask = np.zeros(dims.neighbors)
    for row, idx in enumerate(agent.neighbor_ids):
        if predicted is not None and idx in predicted:
            pred[row] = _relative_row(predicted[idx], scene.ego)
            pred_mask[row] = 1.0
    return EgoContext(
        agent=agent,
        route=route_feat,
        route_mask=route_mask,
        predicted=pred,
        predicted_mask=pred_mask,
        trace=tuple(int(t) for t in trace),
        step=scene.step,
    )


def critic_features(
    scene: SceneState,
    proposal: Sequence[AgentState],
    dims: FeatureDims = FeatureDims(),
) -> np.ndarray:
    """Flat critic input: ego trail, the proposal's decoded sub-poses, ego speed, neighbor states.

    Poses are relative to the current ego pose; neighbors carry their velocity relative to the ego.
    """
    ego = scene.ego
    parts: List[np.ndarray] = []

    def pose_rows(poses: Sequence[Pose2D], count: int) -> np.ndarray:
        rows = np.zeros((count, 4))
        for i, pose in enumerate(list(poses)[-count:]):
            rel = to_frame(pose, ego.pose)
            rows[i] = [rel.x / POSITION_SCALE, rel.y / POSITION_SCALE, math.cos(rel.heading), math.sin(rel.heading)]
        return rows

    parts.append(pose_rows(scene.ego_trail, dims.trail_poses).reshape(-1))
    parts.append(pose_rows([s.pose for s in proposal], dims.substeps).reshape(-1))
    parts.append(np.array([ego.speed / SPEED_SCALE]))

    neighbors = np.zeros((dims.neighbors, CRITIC_NEIGHBOR_FEATURES))
    mask = np.zeros(dims.neighbors)
    others = list(range(1, scene.num_agents))
    if others:
        dist = np.array([ego.pose.distance_to(scene.agents[j].pose) for j in others])
        ego_v = np.array([math.cos(ego.pose.heading), math.sin(ego.pose.heading)]) * ego.speed
        c, s = math.cos(ego.pose.heading), math.sin(ego.pose.heading)
        for row, k in enumerate(nearest_indices(dist, NEIGHBOR_RADIUS, dims.neighbors)):
            other = scene.agents[others[k]]
            v = np.array([math.cos(other.pose.heading), math.sin(other.pose.heading)]) * other.speed - ego_v
            v_rel = np.array([c * v[0] + s * v[1], -s * v[0] + c * v[1]])
            neighbors[row, :5] = _relative_row(other, ego)
            neighbors[row, 5:] = v_rel / SPEED_SCALE
            mask[row] = 1.0
    parts.append(neighbors.reshape(-1))
    parts.append(mask)
    return np.concatenate(parts)


@dataclass
class ContextBatch:
    """Stacked agent contexts, the input layout the set-encoder networks consume."""
    history: np.ndarray
    kinematics: np.ndarray
    neighbors: np.ndarray
    neighbor_mask: np.ndarray
    map_points: np.ndarray
    map_mask: np.ndarray
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.history.shape[0])


def stack_agent_contexts(contexts: Sequence[AgentContext]) -> ContextBatch:
    return ContextBatch(
        history=np.stack([c.history for c in contexts]),
        kinematics=np.stack([c.kinematics for c in contexts]),
        neighbors=np.stack([c.neighbors for c in contexts]),
        neighbor_mask=np.stack([c.neighbor_mask for c in contexts]),
        map_points=np.stack([c.map_points for c in contexts]),
        map_mask=np.stack([c.map_mask for c in contexts]),
    )


def stack_ego_contexts(contexts: Sequence[EgoContext], pad_id: int, max_trace: int) -> ContextBatch:
    batch = stack_agent_contexts([c.agent for c in contexts])
    trace_ids = np.full((len(contexts), max_trace), pad_id, dtype=np.int64)
    trace_mask = np.zeros((len(contexts), max_trace))
    for row, ctx in enumerate(contexts):
        trace_ids[row, : len(ctx.trace)] = ctx.trace
        trace_mask[row, : len(ctx.trace)] = 1.0
    batch.extras = {
        "route": np.stack([c.route for c in contexts]),
        "route_mask": np.stack([c.route_mask for c in contexts]),
        "predicted": np.stack([c.predicted for c in contexts]),
        "predicted_mask": np.stack([c.predicted_mask for c in contexts]),
        "trace_ids": trace_ids,
        "trace_mask": trace_mask,
    }
    return batch
