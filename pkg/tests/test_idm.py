import pytest

from models import AgentState, LanePolyline, RoadMap
from simulation.idm import IdmParams, advance_anchor, idm_accel, integrate_speed, leader_of
from simulation.scene import LaneAnchor

from .conftest import straight_map

PARAMS = IdmParams()


def test_free_road_accelerates_at_a_max():
    assert idm_accel(0.0, 0.0, 1e6, PARAMS) == pytest.approx(PARAMS.a_max, rel=1e-6)


def test_desired_speed_means_no_acceleration():
    assert idm_accel(PARAMS.v0, PARAMS.v0, 1e6, PARAMS) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("gap", [0.5, 0.0, -1.0])
def test_braking_is_clamped_to_twice_b(gap):
    assert idm_accel(10.0, 0.0, gap, PARAMS) == pytest.approx(-2.0 * PARAMS.b)


def test_parameters_must_be_positive():
    with pytest.raises(ValueError):
        IdmParams(b=0.0)


def test_speed_integration():
    assert integrate_speed(2.0, 1.0, 0.1) == pytest.approx((2.1, 0.205))


def test_stopping_inside_the_interval_uses_stop_distance():
    speed, distance = integrate_speed(1.0, -4.0, 0.5)
    assert speed == 0.0
    assert distance == pytest.approx(0.125)


class TestLaneGraph:
    road = RoadMap(
        (LanePolyline("a", ((0.0, 0.0), (10.0, 0.0))), LanePolyline("b", ((10.0, 0.0), (20.0, 0.0)))),
        {"a": ("b",)},
    )

    def test_anchor_moves_onto_successor(self):
        assert advance_anchor(LaneAnchor("a", 8.0), 5.0, self.road) == LaneAnchor("b", 3.0)

    def test_anchor_stays_on_dead_end_lane(self):
        assert advance_anchor(LaneAnchor("b", 8.0), 5.0, self.road) == LaneAnchor("b", 13.0)

    def test_leader_on_successor_lane(self):
        states = [AgentState.make(5.0, 0.0, 0.0, 5.0), AgentState.make(15.0, 0.0, 0.0, 5.0)]
        anchors = [LaneAnchor("a", 5.0), LaneAnchor("b", 5.0)]
        index, gap = leader_of(0, states, anchors, self.road)
        assert index == 1
        assert gap == pytest.approx(10.0 - 4.7)
        assert leader_of(1, states, anchors, self.road) is None


def test_nearest_agent_ahead_is_the_leader():
    states = [AgentState.make(x, 0.0, 0.0, 5.0) for x in (10.0, 60.0, 30.0)]
    index, gap = leader_of(0, states, [None, None, None], straight_map())
    assert index == 2
    assert gap == pytest.approx(20.0 - 4.7)
