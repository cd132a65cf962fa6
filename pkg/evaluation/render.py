"""SVG snapshots of a rollout: lanes, agent boxes, the ego in blue, the expert path in orange."""

from __future__ import annotations

import io
from pathlib import Path
from typing import List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from models import AgentState, PlannerError, Scenario  # noqa: E402
from simulation.record import RolloutRecord  # noqa: E402

EGO_COLOR = "#1f5fbf"
EXPERT_COLOR = "#f28e2b"
AGENT_COLOR = "#6b6b6b"
COLLISION_COLOR = "#d62728"
CORRECTION_COLOR = "#9e9e9e"


class RenderError(PlannerError):
    pass


def collision_events(record: RolloutRecord) -> List[int]:
    """Flattened sub-step index where each contiguous run of collisions starts."""
    flags = [hit for step in record.steps for hit in step.collisions]
    return [k for k, hit in enumerate(flags) if hit and (k == 0 or not flags[k - 1])]


def check_consistent(record: RolloutRecord, scenario: Scenario) -> None:
    problems = []
    if record.scenario_name and scenario.name and record.scenario_name != scenario.name:
        problems.append(f"record is for scenario {record.scenario_name!r}, not {scenario.name!r}")
    if abs(record.dt - scenario.dt) > 1e-12:
        problems.append(f"record dt {record.dt} differs from scenario dt {scenario.dt}")
    if record.initial_ego.pose.distance_to(scenario.ego_init.pose) > 1e-6:
        problems.append("record starts from another ego state")
    for step in record.steps:
        if len(step.agent_states) != scenario.num_agents:
            problems.append(f"step {step.step} has agent states for another number of agents")
            break
    if problems:
        raise RenderError("Rollout record does not match the scenario", {"problems": problems})


def _box_polygon(state: AgentState, **style) -> Polygon:
    return Polygon(state.box.corners(), closed=True, **style)


def draw(record: RolloutRecord, scenario: Scenario, every: int = 4):
    """Matplotlib figure of the rollout; agent boxes are drawn every ``every`` planning steps."""
    check_consistent(record, scenario)
    fig, ax = plt.subplots(figsize=(8, 8))
    ax.set_aspect("equal")
    ax.axis("off")

    for lane in scenario.map.lanes:
        pts = lane.array
        ax.plot(pts[:, 0], pts[:, 1], color="#cccccc", linewidth=lane.width * 4, solid_capstyle="butt",
                zorder=0, gid=f"lane_{lane.lane_id}")
        ax.plot(pts[:, 0], pts[:, 1], color="#ffffff", linewidth=0.6, linestyle="--", zorder=1)

    expert = scenario.expert.positions
    ax.plot(expert[:, 0], expert[:, 1], color=EXPERT_COLOR, linewidth=1.5, zorder=2, gid="expert")

    ego = record.ego_trajectory()
    ax.plot(ego.positions[:, 0], ego.positions[:, 1], color=EGO_COLOR, linewidth=1.0, zorder=3, gid="ego_path")

    selected = list(range(0, len(record.steps), max(1, every)))
    if record.steps and selected[-1] != len(record.steps) - 1:
        selected.append(len(record.steps) - 1)
    ax.add_patch(_box_polygon(record.initial_ego, facecolor=EGO_COLOR, alpha=0.25, zorder=4))
    for i in range(scenario.num_agents):
        ax.add_patch(_box_polygon(scenario.agents_init[i], facecolor=AGENT_COLOR, alpha=0.2, zorder=4))
    for n, idx in enumerate(selected):
        step = record.steps[idx]
        alpha = 0.3 + 0.6 * (n + 1) / len(selected)
        ax.add_patch(_box_polygon(step.ego_states[-1], facecolor=EGO_COLOR, alpha=alpha, zorder=5))
        for states in step.agent_states:
            ax.add_patch(_box_polygon(states[-1], facecolor=AGENT_COLOR, alpha=alpha, zorder=4))

    corrected = [s.ego_states[0] for s in record.steps if s.correction_tokens > 0]
    if corrected:
        ax.plot([s.pose.x for s in corrected], [s.pose.y for s in corrected], linestyle="none", marker="|",
                markersize=8, color=CORRECTION_COLOR, zorder=6, gid="corrections")

    states = ego.states[1:]
    for n, k in enumerate(collision_events(record)):
        pose = states[k].pose
        ax.plot([pose.x], [pose.y], linestyle="none", marker="x", markersize=14, markeredgewidth=3,
                color=COLLISION_COLOR, zorder=7, gid=f"collision_{n}")

    xs = [p[0] for lane in scenario.map.lanes for p in lane.points] + list(ego.positions[:, 0])
    ys = [p[1] for lane in scenario.map.lanes for p in lane.points] + list(ego.positions[:, 1])
    cx, cy = float(ego.positions[:, 0].mean()), float(ego.positions[:, 1].mean())
    half = max(25.0, 0.5 * max(max(ego.positions[:, 0]) - min(ego.positions[:, 0]),
                               max(ego.positions[:, 1]) - min(ego.positions[:, 1])) + 15.0)
    ax.set_xlim(max(min(xs), cx - half), min(max(xs), cx + half))
    ax.set_ylim(max(min(ys), cy - half), min(max(ys), cy + half))
    title = f"{record.scenario_name}  mode={record.mode}  agents={record.agent_mode}"
    if record.metrics is not None:
        title += f"  progression={record.metrics.progression:.2f}"
    ax.set_title(title, fontsize=8)
    return fig


def render_svg(record: RolloutRecord, scenario: Scenario, every: int = 4) -> str:
    """Standalone SVG text; identical inputs give identical bytes."""
    with matplotlib.rc_context({"svg.hashsalt": "correction-planner", "svg.fonttype": "none"}):
        fig = draw(record, scenario, every)
        buffer = io.StringIO()
        try:
            fig.savefig(buffer, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buffer.getvalue()


def render(record: RolloutRecord, scenario: Scenario, out_path: Path, every: int = 4) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(render_svg(record, scenario, every), encoding="utf-8")
    return out_path


def render_many(pairs: Sequence[Tuple[RolloutRecord, Scenario]], out_dir: Path, every: int = 4) -> List[Path]:
    """One ``<scenario_name>.svg`` per record under ``out_dir``."""
    return [render(record, scenario, Path(out_dir) / f"{record.scenario_name}.svg", every)
            for record, scenario in pairs]
