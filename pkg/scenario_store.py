"""
Scenario files and suite directories.

A suite directory holds one ``<name>.json`` per scenario plus a ``suite.json`` manifest listing them
in order. Files are written with sorted keys so identical scenarios give identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from models import InvalidScenarioError, Scenario

MANIFEST_NAME = "suite.json"


def dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=1) + "\n"


def write_json(path: Path, data: Any) -> None:
    """Atomic JSON write (temp file + replace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    tmp_path.write_text(dumps(data), encoding="utf-8")
    tmp_path.replace(path)


def save_scenario(scenario: Scenario, path: Path) -> None:
    write_json(path, scenario.to_dict())


def load_scenario(path: Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidScenarioError(f"Scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidScenarioError(f"Scenario file {path} is not valid JSON: {exc}") from exc
    return Scenario.from_dict(data)


def save_suite(scenarios: Sequence[Scenario], out_dir: Path, meta: Optional[Dict[str, Any]] = None) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names) or any(not n for n in names):
        raise InvalidScenarioError("Suite scenarios need unique, non-empty names")
    paths = []
    for scenario in scenarios:
        path = out_dir / f"{scenario.name}.json"
        save_scenario(scenario, path)
        paths.append(path)
    write_json(out_dir / MANIFEST_NAME, {"scenarios": names, **(meta or {})})
    return paths


def load_suite(suite_dir: Path) -> List[Scenario]:
    """Scenarios in manifest order; without a manifest, every ``*.json`` file sorted by name."""
    suite_dir = Path(suite_dir)
    if not suite_dir.is_dir():
        raise InvalidScenarioError(f"Suite directory not found: {suite_dir}")
    manifest = suite_dir / MANIFEST_NAME
    if manifest.exists():
        names = json.loads(manifest.read_text(encoding="utf-8")).get("scenarios", [])
        return [load_scenario(suite_dir / f"{name}.json") for name in names]
    return [load_scenario(p) for p in sorted(suite_dir.glob("*.json"))]
