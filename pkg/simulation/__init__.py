"""
Simulation package: closed-loop stepping of a scenario.

Key parts
---------
- scene:  SceneState (ego = agent 0), initial and log-replayed scene construction
- idm:    Intelligent Driver Model and lane-following leader search
- record: RolloutRecord / StepRecord with JSON round-trip
- engine: step() with per-sub-step collision and off-road flags
"""

from .engine import AgentMode, SimConfig, SimulationError, StepEvents, step
from .record import RolloutRecord, StepRecord
from .scene import SceneState, initial_scene

__all__ = [
    "AgentMode",
    "RolloutRecord",
    "SceneState",
    "SimConfig",
    "SimulationError",
    "StepEvents",
    "StepRecord",
    "initial_scene",
    "step",
]
