"""Persistence and overrides for the pipeline settings."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from evaluation.suite import SuiteSpec
from models import PlannerError
from networks.common import NetworkDims
from networks.features import FeatureDims
from planning.correction import CorrectionConfig
from simulation.engine import SimConfig
from training.critic_training import CriticConfig
from training.imitation import PretrainConfig
from training.reinforce import RlConfig


class SettingsError(PlannerError):
    pass


@dataclass(frozen=True)
class PathSettings:
    out_dir: str = "runs"
    suite_dir: str = "runs/suite"
    vocab: str = "runs/vocab.json"
    world_model: str = "runs/world_model.ckpt"
    il_policy: str = "runs/policy_il.ckpt"
    policy: str = "runs/policy.ckpt"
    critic: str = "runs/critic.ckpt"


@dataclass(frozen=True)
class VocabSettings:
    target: int = 128
    tolerance: int = 8
    max_iters: int = 40

    def __post_init__(self) -> None:
        if self.target < 1 or self.tolerance < 0 or self.max_iters < 1:
            raise ValueError("Vocabulary target/max_iters must be >= 1 and tolerance >= 0")


@dataclass(frozen=True)
class ModelSettings:
    net: NetworkDims = field(default_factory=NetworkDims)
    features: FeatureDims = field(default_factory=FeatureDims)
    seed: int = 0


@dataclass(frozen=True)
class EvaluationSettings:
    agent_mode: str = "idm"
    thresholds: Tuple[float, ...] = (0.7, 0.75, 0.8)
    lengths: Tuple[int, ...] = (1, 2, 5)
    workers: int = 1
    store_records: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.agent_mode not in ("idm", "logreplay", "worldmodel", "both"):
            raise ValueError("agent_mode must be one of idm, logreplay, worldmodel, both")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class PipelineSettings:
    """Every stage's configuration in one document."""

    paths: PathSettings = field(default_factory=PathSettings)
    vocab: VocabSettings = field(default_factory=VocabSettings)
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    suite: SuiteSpec = field(default_factory=SuiteSpec)

    def to_dict(self) -> Dict[str, Any]:
        """Serialize settings to primitive types for JSON storage."""
        return to_primitive(self)

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "PipelineSettings":
        """Create settings from a (possibly partial) JSON dictionary; missing keys keep their defaults."""
        return from_primitive(PipelineSettings, data, "").check()

    def check(self) -> "PipelineSettings":
        """Cross-section checks: every correction budget must fit the policy's trace capacity."""
        max_trace = self.model.net.max_trace
        budgets = {
            "correction": self.correction.trace_capacity,
            "rl.budget_range": self.rl.correction_config().trace_capacity,
            "evaluation.lengths": max(self.evaluation.lengths, default=0),
        }
        for key, budget in budgets.items():
            if budget > max_trace:
                raise SettingsError(
                    f"{key} allows {budget} correction tokens but model.net.max_trace is {max_trace}",
                    {"key": key, "budget": budget, "max_trace": max_trace},
                )
        return self


def to_primitive(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: to_primitive(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [to_primitive(v) for v in value]
    if isinstance(value, dict):
        return {str(k): to_primitive(v) for k, v in value.items()}
    return value


def coerce(tp: Any, value: Any, where: str) -> Any:
    """Convert a JSON value to the annotated field type."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union:
            if value is None and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)]
            return coerce(inner[0], value, where)
        if dataclasses.is_dataclass(tp):
            if not isinstance(value, dict):
                raise TypeError(f"expected an object, got {value!r}")
            return from_primitive(tp, value, f"{where}.")
        if isinstance(tp, type) and issubclass(tp, Enum):
            return tp(value)
        if origin is tuple:
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(coerce(args[0], v, where) for v in value)
            if len(value) != len(args):
                raise TypeError(f"expected {len(args)} values, got {len(value)}")
            return tuple(coerce(a, v, where) for a, v in zip(args, value))
        if origin is dict:
            return {str(k): coerce(args[1], v, where) for k, v in value.items()}
        if tp is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"not a boolean: {value!r}")
                return value.lower() in ("true", "1")
            return bool(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise SettingsError(f"Invalid value for {where or 'settings'}: {exc}", {"key": where}) from exc
    return value


def from_primitive(cls: type, data: Dict[str, Any], prefix: str) -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise SettingsError(f"Unknown settings keys under {prefix or 'root'}: {unknown}", {"keys": unknown})
    kwargs = {name: coerce(hints[name], value, f"{prefix}{name}") for name, value in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SettingsError(f"Invalid settings for {prefix.rstrip('.') or 'root'}: {exc}") from exc


def _parse_scalar(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(settings: PipelineSettings, overrides: Iterable[str]) -> PipelineSettings:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise SettingsError(f"Override must look like section.key=value, got {item!r}")
        settings = _set_path(settings, key.strip().split("."), _parse_scalar(raw.strip()), key.strip())
    # checked once at the end so that budget and max_trace can be raised in either order
    return settings.check()


def _set_path(obj: Any, parts: list, value: Any, full_key: str) -> Any:
    if not dataclasses.is_dataclass(obj):
        raise SettingsError(f"Unknown settings key: {full_key}", {"key": full_key})
    fields = {f.name: f for f in dataclasses.fields(obj)}
    head = parts[0]
    if head not in fields:
        raise SettingsError(f"Unknown settings key: {full_key}", {"key": full_key})
    if len(parts) == 1:
        new_value = coerce(typing.get_type_hints(type(obj))[head], value, full_key)
    else:
        new_value = _set_path(getattr(obj, head), parts[1:], value, full_key)
    try:
        return dataclasses.replace(obj, **{head: new_value})
    except (TypeError, ValueError) as exc:
        raise SettingsError(f"Invalid value for {full_key}: {exc}", {"key": full_key}) from exc


class SettingsManager:
    """Handles loading and saving pipeline settings to disk."""

    def __init__(self, storage_path: Optional[Path] = None, explicit: bool = False) -> None:
        package_root = Path(__file__).resolve().parent
        self._storage_path = Path(storage_path) if storage_path else package_root / "settings.json"
        self._explicit = explicit

    @property
    def storage_path(self) -> Path:
        """Absolute path to the settings file."""
        return self._storage_path

    def load(self) -> PipelineSettings:
        """Load settings from disk.

        A missing or corrupt default file gives the defaults (a corrupt one is kept as ``.bak``); a file
        named explicitly by the user must exist and parse, otherwise :class:`SettingsError` is raised.
        """
        path = self.storage_path
        if not path.exists():
            if self._explicit:
                raise SettingsError(f"Config file not found: {path}", {"path": str(path)})
            return PipelineSettings()

        try:
            raw_data = json.loads(path.read_text(encoding="utf-8"))
            if not isinstance(raw_data, dict):
                raise SettingsError("Settings file has invalid structure")
            return PipelineSettings.from_dict(raw_data)
        except (json.JSONDecodeError, SettingsError) as exc:
            if self._explicit:
                if isinstance(exc, SettingsError):
                    raise
                raise SettingsError(f"Config file {path} is not valid JSON: {exc}", {"path": str(path)}) from exc
            backup_path = path.with_suffix(".bak")
            try:
                path.replace(backup_path)
            except OSError:
                pass
            return PipelineSettings()

    def save(self, settings: PipelineSettings) -> None:
        """Persist settings atomically to disk."""
        path = self.storage_path
        path.parent.mkdir(parents=True, exist_ok=True)

        tmp_path = path.with_suffix(".tmp")
        payload = json.dumps(settings.to_dict(), indent=2, ensure_ascii=False)
        tmp_path.write_text(payload, encoding="utf-8")
        tmp_path.replace(path)
