import math
import xml.etree.ElementTree as ET
from dataclasses import replace

import pytest

from evaluation.render import RenderError, collision_events, render, render_svg
from planning.correction import CorrectionConfig, CorrectionMode
from planning.rollout import TokenReplayPolicy, rollout
from simulation.engine import SimConfig
from simulation.scene import tokenize_scenario

from .conftest import make_scenario


@pytest.fixture(scope="module")
def head_on():
    return make_scenario(agents=[(60.0, 0.0, math.pi, 8.0)], horizon=8, name="head_on")


@pytest.fixture(scope="module")
def record(head_on, vocab):
    policy = TokenReplayPolicy(vocab, tokenize_scenario(head_on, vocab).expert)
    return rollout(head_on, policy, None, CorrectionConfig(mode=CorrectionMode.OFF), None, SimConfig(), 0)


def _ids(svg: str):
    return [el.get("id") for el in ET.fromstring(svg).iter() if el.get("id")]


def test_svg_parses_and_marks_each_collision(head_on, record):
    ids = _ids(render_svg(record, head_on))
    events = collision_events(record)
    assert events
    assert len([i for i in ids if i.startswith("collision_")]) == len(events)
    assert "expert" in ids
    assert "ego_path" in ids
    assert "lane_main" in ids


def test_rendering_is_byte_deterministic(head_on, record, tmp_path):
    a = render(record, head_on, tmp_path / "a.svg").read_bytes()
    b = render(record, head_on, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_collision_runs_are_counted_once():
    class Stub:
        steps = [type("S", (), {"collisions": flags})() for flags in
                 ([False, True, True, True, True], [True, False, False, True, False])]

    assert collision_events(Stub()) == [1, 8]


def test_inconsistent_inputs(head_on, record):
    with pytest.raises(RenderError):
        render_svg(replace(record, scenario_name="other"), head_on)
    with pytest.raises(RenderError):
        render_svg(record, make_scenario(name="head_on"))
