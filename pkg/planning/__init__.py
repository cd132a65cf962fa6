"""
Planning package.

Key parts
---------
- correction: CorrectionConfig, select_action (propose, evaluate, correct) and the baseline modes
- rollout:    PlanningStep step context, closed-loop rollout(), TokenReplayPolicy
"""

from .correction import (
    CorrectionConfig,
    CorrectionMode,
    CorrectionOutcome,
    Sampling,
    check_trace_capacity,
    repeat_guard,
    select_action,
)
from .rollout import PlanningStep, TokenReplayPolicy, rollout

__all__ = [
    "CorrectionConfig",
    "CorrectionMode",
    "CorrectionOutcome",
    "PlanningStep",
    "Sampling",
    "TokenReplayPolicy",
    "check_trace_capacity",
    "repeat_guard",
    "rollout",
    "select_action",
]
