"""Shared plumbing for the training engines: log callbacks, divergence checks, CSV output."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from models import PlannerError
from nn.params import global_norm

CSV_SCHEMA_VERSION = 1


class TrainingDivergedError(PlannerError):
    pass


class LoggingEngine:
    """``on_log`` callback wiring shared by every long-running engine."""

    def __init__(self) -> None:
        self._on_log: Optional[Callable[[str], None]] = None

    def on_log(self, cb: Callable[[str], None]) -> None:
        self._on_log = cb

    def _log(self, msg: str) -> None:
        if self._on_log:
            try:
                self._on_log(msg)
            except Exception:
                pass


def check_finite(stage: str, step: int, losses: Dict[str, float], grads: Dict[str, np.ndarray]) -> None:
    """Raise :class:`TrainingDivergedError` on a non-finite loss or gradient."""
    bad_losses = {k: v for k, v in losses.items() if not math.isfinite(v)}
    bad_grads = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
    if bad_losses or bad_grads:
        raise TrainingDivergedError(
            f"{stage} diverged at step {step}",
            {
                "stage": stage,
                "step": step,
                "losses": {k: repr(v) for k, v in losses.items()},
                "non_finite_grads": bad_grads,
                "grad_norm": repr(global_norm({k: g for k, g in grads.items() if k not in bad_grads})),
            },
        )


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, Any]], kind: str) -> None:
    """CSV with a versioned ``# schema`` comment line; floats are written with ``repr`` for exact diffs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# schema={kind} version={CSV_SCHEMA_VERSION}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
    tmp_path.replace(path)


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)
