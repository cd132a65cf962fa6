"""Rollout records: everything a renderer, the critic labeller and the evaluator need from one run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from models import AgentState, PlannerError, Trajectory

from .scene import SceneState

RECORD_FORMAT_VERSION = 1


class RecordError(PlannerError):
    pass


def _state_row(state: AgentState) -> List[float]:
    return state.to_list() + [state.box.length, state.box.width]


def _state_from_row(row: List[float]) -> AgentState:
    return AgentState.from_list(row[:4], row[4:6])


@dataclass
class StepRecord:
    """One planning step.

    ``proposals`` is the correction trace followed by the final proposal; ``executed_index`` points at the
    executed proposal (the last one unless the correction budget was exhausted).
    """
    step: int
    scene: SceneState
    proposals: List[int]
    probs: List[Optional[float]]
    executed: int
    executed_index: int
    budget: int
    exhausted: bool
    ego_states: List[AgentState]
    agent_states: List[List[AgentState]]
    collisions: List[bool]
    offroad: List[bool]

    @property
    def trace(self) -> List[int]:
        return self.proposals[:-1]

    @property
    def correction_tokens(self) -> int:
        return len(self.proposals) - 1

    @property
    def collided(self) -> bool:
        return any(self.collisions)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "scene": self.scene.to_dict(),
            "proposals": list(self.proposals),
            "probs": list(self.probs),
            "executed": self.executed,
            "executed_index": self.executed_index,
            "budget": self.budget,
            "exhausted": self.exhausted,
            "ego_states": [_state_row(s) for s in self.ego_states],
            "agent_states": [[_state_row(s) for s in states] for states in self.agent_states],
            "collisions": list(self.collisions),
            "offroad": list(self.offroad),
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "StepRecord":
        return StepRecord(
            step=int(data["step"]),
            scene=SceneState.from_dict(data["scene"]),
            proposals=[int(t) for t in data["proposals"]],
            probs=[None if p is None else float(p) for p in data["probs"]],
            executed=int(data["executed"]),
            executed_index=int(data["executed_index"]),
            budget=int(data["budget"]),
            exhausted=bool(data["exhausted"]),
            ego_states=[_state_from_row(r) for r in data["ego_states"]],
            agent_states=[[_state_from_row(r) for r in rows] for rows in data["agent_states"]],
            collisions=[bool(f) for f in data["collisions"]],
            offroad=[bool(f) for f in data["offroad"]],
        )


@dataclass
class RolloutMetrics:
    collided: bool
    offroad: bool
    progression: float
    avg_correction_tokens: float
    wall_clock: float
    collision_step: Optional[int] = None
    first_flag_step: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "collided": self.collided,
            "offroad": self.offroad,
            "progression": self.progression,
            "avg_correction_tokens": self.avg_correction_tokens,
            "wall_clock": self.wall_clock,
            "collision_step": self.collision_step,
            "first_flag_step": self.first_flag_step,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RolloutMetrics":
        return RolloutMetrics(
            collided=bool(data["collided"]),
            offroad=bool(data["offroad"]),
            progression=float(data["progression"]),
            avg_correction_tokens=float(data["avg_correction_tokens"]),
            wall_clock=float(data["wall_clock"]),
            collision_step=data.get("collision_step"),
            first_flag_step=data.get("first_flag_step"),
        )


@dataclass
class RolloutRecord:
    scenario_name: str
    seed: int
    mode: str
    agent_mode: str
    dt: float
    initial_ego: AgentState
    steps: List[StepRecord] = field(default_factory=list)
    metrics: Optional[RolloutMetrics] = None
    # in-memory only: EgoContext each executed token was proposed under (used by REINFORCE)
    contexts: List[Any] = field(default_factory=list, repr=False, compare=False)

    def ego_trajectory(self) -> Trajectory:
        states = [self.initial_ego] + [s for step in self.steps for s in step.ego_states]
        return Trajectory(states, self.dt)

    @property
    def collision_flags(self) -> List[bool]:
        return [step.collided for step in self.steps]

    def to_dict(self, include_wall_clock: bool = True) -> Dict[str, Any]:
        metrics = self.metrics.to_dict() if self.metrics else None
        if metrics is not None and not include_wall_clock:
            metrics.pop("wall_clock")
        return {
            "format_version": RECORD_FORMAT_VERSION,
            "scenario": self.scenario_name,
            "seed": self.seed,
            "mode": self.mode,
            "agent_mode": self.agent_mode,
            "dt": self.dt,
            "initial_ego": _state_row(self.initial_ego),
            "steps": [s.to_dict() for s in self.steps],
            "metrics": metrics,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RolloutRecord":
        metrics = data.get("metrics")
        if metrics is not None and "wall_clock" not in metrics:
            metrics = dict(metrics, wall_clock=0.0)
        return RolloutRecord(
            scenario_name=str(data["scenario"]),
            seed=int(data["seed"]),
            mode=str(data["mode"]),
            agent_mode=str(data["agent_mode"]),
            dt=float(data["dt"]),
            initial_ego=_state_from_row(data["initial_ego"]),
            steps=[StepRecord.from_dict(s) for s in data["steps"]],
            metrics=RolloutMetrics.from_dict(metrics) if metrics is not None else None,
        )

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_suffix(path.suffix + ".tmp")
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
        tmp_path.replace(path)

    @staticmethod
    def load(path: Path) -> "RolloutRecord":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return RolloutRecord.from_dict(json.load(f))
        except FileNotFoundError as exc:
            raise RecordError(f"Rollout record not found: {path}", {"path": str(path)}) from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"Malformed rollout record {path}: {exc}", {"path": str(path)}) from exc
