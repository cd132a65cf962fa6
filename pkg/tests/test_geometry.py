import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geometry import boxes_overlap, from_frame, offroad, progression, to_frame
from models import AgentState, InvalidScenarioError, LanePolyline, OrientedBox, Pose2D, RoadMap, Trajectory

from .conftest import constant_motion, straight_map

coords = st.floats(min_value=-50, max_value=50, allow_nan=False)
angles = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)
near = st.floats(min_value=-6, max_value=6, allow_nan=False)
# (extra length, width); length = width + extra
sizes = st.tuples(st.floats(min_value=0.0, max_value=4.0), st.floats(min_value=1.0, max_value=3.0))


def arc_path(speed: float, yaw_rate: float, num_states: int = 31, dt: float = 0.1) -> Trajectory:
    x = y = heading = 0.0
    states = [AgentState.make(x, y, heading, speed)]
    for _ in range(num_states - 1):
        mid = heading + 0.5 * yaw_rate * dt
        x += speed * dt * math.cos(mid)
        y += speed * dt * math.sin(mid)
        heading += yaw_rate * dt
        states.append(AgentState.make(x, y, heading, speed))
    return Trajectory(tuple(states), dt)


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 and d2 and d3 and d4:
        return True
    return (
        (d1 == 0 and on_segment(q1, q2, p1))
        or (d2 == 0 and on_segment(q1, q2, p2))
        or (d3 == 0 and on_segment(p1, p2, q1))
        or (d4 == 0 and on_segment(p1, p2, q2))
    )


def _inside(box: OrientedBox, x: float, y: float) -> bool:
    local = to_frame(Pose2D(x, y), box.center)
    return abs(local.x) <= box.length / 2 and abs(local.y) <= box.width / 2


def polygon_overlap_oracle(a: OrientedBox, b: OrientedBox) -> bool:
    ca, cb = a.corners(), b.corners()
    for i in range(4):
        for j in range(4):
            if _segments_intersect(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]):
                return True
    return _inside(b, *ca[0]) or _inside(a, *cb[0])


class TestBoxesOverlap:
    def test_agrees_with_polygon_oracle_on_random_pairs(self):
        rng = np.random.default_rng(7)
        disagreements = 0
        for _ in range(1000):
            boxes = []
            for _ in range(2):
                width = rng.uniform(1.0, 3.0)
                boxes.append(OrientedBox(Pose2D(*rng.uniform(-6, 6, 2), rng.uniform(-math.pi, math.pi)),
                                         width + rng.uniform(0.0, 4.0), width))
            disagreements += boxes_overlap(*boxes) != polygon_overlap_oracle(*boxes)
        assert disagreements == 0

    def test_touching_edges_count_as_overlap(self):
        a = OrientedBox(Pose2D(0.0, 0.0), 4.0, 2.0)
        b = OrientedBox(Pose2D(4.0, 0.0), 4.0, 2.0)
        assert boxes_overlap(a, b)

    def test_separated_along_rotated_axis(self):
        a = OrientedBox(Pose2D(0.0, 0.0, math.pi / 4), 4.0, 1.0)
        b = OrientedBox(Pose2D(2.0, -2.0, math.pi / 4), 4.0, 1.0)
        assert not boxes_overlap(a, b)

    @given(coords, coords, angles)
    def test_box_overlaps_itself(self, x, y, h):
        box = OrientedBox(Pose2D(x, y, h))
        assert boxes_overlap(box, box)

    @given(near, near, angles, sizes, near, near, angles, sizes)
    def test_overlap_is_symmetric(self, ax, ay, ah, a_size, bx, by, bh, b_size):
        a = OrientedBox(Pose2D(ax, ay, ah), a_size[0] + a_size[1], a_size[1])
        b = OrientedBox(Pose2D(bx, by, bh), b_size[0] + b_size[1], b_size[1])
        assert boxes_overlap(a, b) == boxes_overlap(b, a)


@given(coords, coords, angles, coords, coords, angles)
def test_frame_transform_inverts(x, y, h, rx, ry, rh):
    ref = Pose2D(rx, ry, rh)
    back = from_frame(to_frame(Pose2D(x, y, h), ref), ref)
    assert back.x == pytest.approx(x, abs=1e-9)
    assert back.y == pytest.approx(y, abs=1e-9)
    assert math.cos(back.heading - h) == pytest.approx(1.0)


class TestOffroad:
    def test_centered_box_is_on_road(self):
        assert not offroad(OrientedBox(Pose2D(50.0, 0.0), 4.7, 2.1), straight_map())

    def test_box_beside_the_lane_is_offroad(self):
        assert offroad(OrientedBox(Pose2D(50.0, 2.0), 4.7, 2.1), straight_map())

    def test_corners_on_corridor_edge_are_on_road(self):
        assert not offroad(OrientedBox(Pose2D(50.0, 0.0), 4.0, 3.5), straight_map(width=3.5))

    def test_box_across_two_adjacent_lanes(self):
        road = RoadMap((
            LanePolyline("a", ((0.0, 0.0), (100.0, 0.0))),
            LanePolyline("b", ((0.0, 3.5), (100.0, 3.5))),
        ))
        assert not offroad(OrientedBox(Pose2D(50.0, 1.75), 4.7, 2.1), road)

    def test_empty_map_is_rejected(self):
        with pytest.raises(InvalidScenarioError):
            offroad(OrientedBox(Pose2D(0.0, 0.0)), RoadMap(()))


class TestProgression:
    def test_half_way(self):
        expert = constant_motion(0.0, 0.0, 0.0, 10.0, 21)
        ego = constant_motion(0.0, 0.0, 0.0, 5.0, 21)
        assert progression(ego, expert) == pytest.approx(0.5)

    def test_clipped_to_unit_interval(self):
        expert = constant_motion(0.0, 0.0, 0.0, 10.0, 21)
        assert progression(constant_motion(0.0, 0.0, 0.0, 20.0, 21), expert) == 1.0
        assert progression(Trajectory((AgentState.make(-5.0, 0.0, 0.0, 0.0),)), expert) == 0.0

    def test_zero_length_expert_is_rejected(self):
        still = Trajectory((AgentState.make(0.0, 0.0, 0.0, 0.0),) * 3)
        with pytest.raises(InvalidScenarioError):
            progression(still, still)

    @given(st.floats(min_value=1.0, max_value=15.0), st.floats(min_value=-0.5, max_value=0.5))
    def test_monotone_along_the_expert_path(self, speed, yaw_rate):
        expert = arc_path(speed, yaw_rate)
        values = [progression(Trajectory((state,)), expert) for state in expert.states]
        assert values[0] == pytest.approx(0.0, abs=1e-9)
        assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(1.0)

    def test_matches_dense_projection_on_bent_path(self):
        corner = [AgentState.make(x, 0.0, 0.0, 5.0) for x in np.linspace(0.0, 20.0, 11)]
        corner += [AgentState.make(20.0, y, math.pi / 2, 5.0) for y in np.linspace(2.0, 20.0, 10)]
        expert = Trajectory(tuple(corner))
        rng = np.random.default_rng(3)
        path = expert.positions
        dense = np.concatenate([np.linspace(a, b, 2001) for a, b in zip(path[:-1], path[1:])])
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
        for _ in range(50):
            x, y = rng.uniform(-2.0, 24.0, 2)
            got = progression(Trajectory((AgentState.make(x, y, 0.0, 0.0),)), expert)
            nearest = int(np.argmin(np.linalg.norm(dense - [x, y], axis=1)))
            assert got == pytest.approx(arc[nearest] / arc[-1], abs=1e-3)
