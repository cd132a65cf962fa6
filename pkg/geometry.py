"""
Geometry and metric primitives shared by the simulator, the tokenizer and the evaluation harness.

Key parts
---------
- to_frame / from_frame: rigid transforms between world and a reference pose
- boxes_overlap:         separating-axis test for two oriented rectangles
- offroad:               corner test against the union of lane corridors
- progression:           arc-length fraction of the expert path reached by the ego

All functions are pure.
"""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np

from models import (
    InvalidScenarioError,
    OrientedBox,
    Pose2D,
    RoadMap,
    Trajectory,
    project_onto_polyline,
)


def to_frame(p: Pose2D, ref: Pose2D) -> Pose2D:
    """Express ``p`` in the frame of ``ref``."""
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    dx, dy = p.x - ref.x, p.y - ref.y
    return Pose2D(c * dx + s * dy, -s * dx + c * dy, p.heading - ref.heading)


def from_frame(p: Pose2D, ref: Pose2D) -> Pose2D:
    """Inverse of :func:`to_frame`: map a pose given in ``ref``'s frame back to the world."""
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    return Pose2D(ref.x + c * p.x - s * p.y, ref.y + s * p.x + c * p.y, p.heading + ref.heading)


def points_to_frame(xy: np.ndarray, ref: Pose2D) -> np.ndarray:
    """Vectorized :func:`to_frame` for an (N, 2) array of points."""
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    d = np.asarray(xy, dtype=float) - np.array([ref.x, ref.y])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def _axes(box: OrientedBox) -> List[Tuple[float, float]]:
    c, s = math.cos(box.center.heading), math.sin(box.center.heading)
    return [(c, s), (-s, c)]


def _project(corners: Sequence[Tuple[float, float]], axis: Tuple[float, float]) -> Tuple[float, float]:
    values = [x * axis[0] + y * axis[1] for x, y in corners]
    return min(values), max(values)


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """True iff the rectangles intersect; touching edges count as overlap."""
    corners_a, corners_b = a.corners(), b.corners()
    for axis in _axes(a) + _axes(b):
        min_a, max_a = _project(corners_a, axis)
        min_b, max_b = _project(corners_b, axis)
        if max_a < min_b or max_b < min_a:
            return False
    return True


def point_on_road(x: float, y: float, road_map: RoadMap) -> bool:
    for lane in road_map.lanes:
        _, dist = lane.project(x, y)
        if dist <= lane.width / 2.0:
            return True
    return False


def offroad(box: OrientedBox, road_map: RoadMap) -> bool:
    """True iff some corner lies outside every lane corridor (centerline +- width/2, inclusive)."""
    if not road_map.lanes:
        raise InvalidScenarioError("Off-road test needs a map with at least one lane")
    return any(not point_on_road(x, y, road_map) for x, y in box.corners())


def path_arc_length(path: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def progression(ego: Trajectory, expert: Trajectory) -> float:
    """Projected arc length of the ego's final position over the expert path length, clipped to [0, 1]."""
    path = expert.positions
    cumulative = path_arc_length(path)
    total = float(cumulative[-1])
    if total <= 0.0:
        raise InvalidScenarioError("Expert trajectory has zero arc length", {"states": len(expert)})
    final = ego.states[-1].pose
    s, _ = project_onto_polyline(path, cumulative, final.x, final.y)
    return float(min(1.0, max(0.0, s / total)))
