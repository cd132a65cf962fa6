"""
Evaluation package.

Key parts
---------
- expert:  privileged scripted expert (path tracking, IDM speed, stop wall with searched release time)
- suite:   SuiteSpec and the five conflict archetypes, generate_suite
- harness: Checkpoints, evaluate, ablate, EvalReport (re-aggregable from stored rollouts)
- render:  deterministic SVG snapshots of rollouts (single record or a directory of records)
"""

from .harness import Checkpoints, EvalReport, EvalRow, ablate, aggregate, evaluate
from .render import RenderError, render, render_many
from .suite import ARCHETYPES, SuiteGenerationError, SuiteSpec, generate_suite

__all__ = [
    "ARCHETYPES",
    "Checkpoints",
    "EvalReport",
    "EvalRow",
    "RenderError",
    "SuiteGenerationError",
    "SuiteSpec",
    "ablate",
    "aggregate",
    "evaluate",
    "generate_suite",
    "render",
    "render_many",
]
