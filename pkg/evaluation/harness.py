"""
Closed-loop evaluation and ablation grids.

Every row of an :class:`EvalReport` is aggregated from stored :class:`RolloutRecord` files only, so a
report can be rebuilt offline with :func:`aggregate` / :func:`reaggregate`.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import Scenario
from networks.collision_critic import CollisionCritic
from networks.common import ModelError
from networks.ego_policy import EgoPolicy
from networks.world_model import WorldModel
from planning.correction import CorrectionConfig, CorrectionMode, check_trace_capacity
from planning.rollout import rollout
from simulation.engine import AgentMode, SimConfig
from simulation.record import RolloutRecord
from tokenizer import TokenVocabulary, vocabulary_digest
from training.common import LoggingEngine, write_csv

REPORT_COLUMNS = [
    "label",
    "agent_mode",
    "mode",
    "threshold",
    "max_len",
    "rollouts",
    "collision_rate",
    "offroad_rate",
    "progression",
    "avg_correction_tokens",
    "mean_ttc_first_flag",
    "wall_clock_per_rollout",
]

# agent modes behind the "reactive" / "non-reactive" evaluation settings
EVAL_AGENT_MODES = {"idm": (AgentMode.IDM,), "logreplay": (AgentMode.LOG_REPLAY,),
                    "worldmodel": (AgentMode.WORLD_MODEL,), "both": (AgentMode.IDM, AgentMode.LOG_REPLAY)}


@dataclass(frozen=True)
class Checkpoints:
    """Everything a rollout needs, pinned to one vocabulary."""
    vocab: TokenVocabulary
    policy: EgoPolicy
    world_model: Optional[WorldModel] = None
    critic: Optional[CollisionCritic] = None

    def __post_init__(self) -> None:
        expected = vocabulary_digest(self.vocab)
        for name, model in (("policy", self.policy), ("world_model", self.world_model), ("critic", self.critic)):
            if model is not None and vocabulary_digest(model.vocab) != expected:
                raise ModelError(f"The {name} checkpoint was trained on another vocabulary",
                                 {"model": name, "expected": expected})

    @staticmethod
    def load(
        vocab_path: Path,
        policy_path: Path,
        world_model_path: Optional[Path] = None,
        critic_path: Optional[Path] = None,
    ) -> "Checkpoints":
        vocab = TokenVocabulary.load(vocab_path)
        return Checkpoints(
            vocab=vocab,
            policy=EgoPolicy.load(policy_path, vocab),
            world_model=WorldModel.load(world_model_path, vocab) if world_model_path else None,
            critic=CollisionCritic.load(critic_path, vocab) if critic_path else None,
        )

    def with_policy(self, policy: EgoPolicy) -> "Checkpoints":
        return replace(self, policy=policy)


@dataclass(frozen=True)
class EvalRow:
    label: str
    agent_mode: str
    mode: str
    threshold: float
    max_len: int
    rollouts: int
    collision_rate: float
    offroad_rate: float
    progression: float
    avg_correction_tokens: float
    mean_ttc_first_flag: float
    wall_clock_per_rollout: float

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)

    def to_csv(self, path: Path) -> None:
        write_csv(path, REPORT_COLUMNS, [r.to_dict() for r in self.rows], "eval_report")

    def find(self, **criteria) -> List[EvalRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]


def rollout_seed(seed: int, index: int) -> int:
    """Per-scenario rollout seed, shared by every configuration so comparisons are paired."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def config_tag(cfg: CorrectionConfig) -> str:
    return f"{cfg.mode.value}_tau{cfg.threshold:g}_C{cfg.max_len}_n{cfg.candidates}"


def time_to_collision(record: RolloutRecord) -> Optional[int]:
    """Planning steps from the first critic flag to the first collision, when both exist in that order."""
    m = record.metrics
    if m is None or m.collision_step is None or m.first_flag_step is None:
        return None
    if m.first_flag_step > m.collision_step:
        return None
    return m.collision_step - m.first_flag_step


def aggregate(
    records: Sequence[RolloutRecord],
    cfg: CorrectionConfig,
    agent_mode: str,
    label: str = "policy",
) -> EvalRow:
    """One report row from stored records (order independent)."""
    if not records:
        raise ValueError("Cannot aggregate an empty set of rollouts")
    records = sorted(records, key=lambda r: (r.scenario_name, r.seed))
    metrics = [r.metrics for r in records]
    if any(m is None for m in metrics):
        raise ValueError("Every rollout needs metrics to be aggregated")
    corrected = [m.avg_correction_tokens for m in metrics if m.avg_correction_tokens > 0]
    ttcs = [t for t in (time_to_collision(r) for r in records) if t is not None]
    return EvalRow(
        label=label,
        agent_mode=agent_mode,
        mode=cfg.mode.value,
        threshold=float(cfg.threshold),
        max_len=int(cfg.max_len),
        rollouts=len(records),
        collision_rate=100.0 * float(np.mean([m.collided for m in metrics])),
        offroad_rate=100.0 * float(np.mean([m.offroad for m in metrics])),
        progression=100.0 * float(np.mean([m.progression for m in metrics])),
        avg_correction_tokens=float(np.mean(corrected)) if corrected else 0.0,
        mean_ttc_first_flag=float(np.mean(ttcs)) if ttcs else math.nan,
        wall_clock_per_rollout=float(np.mean([m.wall_clock for m in metrics])),
    )


def load_records(records_dir: Path) -> List[RolloutRecord]:
    return [RolloutRecord.load(p) for p in sorted(Path(records_dir).glob("*.json"))]


def reaggregate(records_dir: Path, cfg: CorrectionConfig, agent_mode: str, label: str = "policy") -> EvalRow:
    return aggregate(load_records(records_dir), cfg, agent_mode, label)


def resolve_agent_modes(agent_mode: str) -> Tuple[AgentMode, ...]:
    try:
        return EVAL_AGENT_MODES[agent_mode]
    except KeyError:
        raise ValueError(f"Unknown agent mode {agent_mode!r}; expected one of {sorted(EVAL_AGENT_MODES)}") from None


class Evaluator(LoggingEngine):
    """Runs full-horizon rollouts of one set of checkpoints over a scenario suite."""

    def __init__(
        self,
        scenarios: Sequence[Scenario],
        checkpoints: Checkpoints,
        sim_cfg: SimConfig = SimConfig(),
        seed: int = 0,
        workers: int = 1,
        records_dir: Optional[Path] = None,
    ) -> None:
        super().__init__()
        if not scenarios:
            raise ValueError("No scenarios to evaluate")
        self.scenarios = list(scenarios)
        self.checkpoints = checkpoints
        self.sim_cfg = replace(sim_cfg, early_stop=False)
        self.seed = seed
        self.workers = workers
        self.records_dir = Path(records_dir) if records_dir else None

    def _check(self, cfg: CorrectionConfig, agent_mode: AgentMode) -> None:
        needs_critic = cfg.mode not in (CorrectionMode.OFF, CorrectionMode.CANDIDATE_SELECTION)
        if needs_critic and self.checkpoints.critic is None:
            raise ModelError(f"Correction mode {cfg.mode.value} needs a critic checkpoint")
        if agent_mode == AgentMode.WORLD_MODEL and self.checkpoints.world_model is None:
            raise ModelError("World-model agents need a world-model checkpoint")
        check_trace_capacity(cfg, self.checkpoints.policy.dims.max_trace)

    def run_records(self, cfg: CorrectionConfig, agent_mode: AgentMode) -> List[RolloutRecord]:
        self._check(cfg, agent_mode)
        ck = self.checkpoints
        sim_cfg = replace(self.sim_cfg, agent_mode=agent_mode)

        def run(i: int) -> RolloutRecord:
            return rollout(self.scenarios[i], ck.policy, ck.critic, cfg, ck.world_model, sim_cfg,
                           rollout_seed(self.seed, i))

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(run, range(len(self.scenarios))))
        return [run(i) for i in range(len(self.scenarios))]

    def evaluate(self, cfg: CorrectionConfig, agent_mode: str = "idm", label: str = "policy") -> List[EvalRow]:
        """One row per resolved agent mode; records are stored under ``records_dir`` when set."""
        rows = []
        for mode in resolve_agent_modes(agent_mode):
            records = self.run_records(cfg, mode)
            if self.records_dir is not None:
                out = self.records_dir / label / config_tag(cfg) / mode.value
                for record in records:
                    record.save(out / f"{record.scenario_name}.json")
            row = aggregate(records, cfg, mode.value, label)
            self._log(
                f"{label} {config_tag(cfg)} [{mode.value}]: collisions {row.collision_rate:.1f}%, "
                f"off-road {row.offroad_rate:.1f}%, progression {row.progression:.1f}%"
            )
            rows.append(row)
        return rows


def evaluate(
    scenarios: Sequence[Scenario],
    checkpoints: Checkpoints,
    correction_cfg: CorrectionConfig,
    agent_mode: str = "idm",
    seed: int = 0,
    sim_cfg: SimConfig = SimConfig(),
    workers: int = 1,
    records_dir: Optional[Path] = None,
    on_log: Optional[Callable[[str], None]] = None,
    label: str = "policy",
) -> EvalReport:
    evaluator = Evaluator(scenarios, checkpoints, sim_cfg, seed, workers, records_dir)
    if on_log:
        evaluator.on_log(on_log)
    return EvalReport(evaluator.evaluate(correction_cfg, agent_mode, label))


def baseline_configs(base: CorrectionConfig, candidates: int = 10) -> List[CorrectionConfig]:
    """Off, rejection sampling, candidate selection and last-token-only at the base threshold/length."""
    return [
        replace(base, mode=CorrectionMode.OFF),
        replace(base, mode=CorrectionMode.REJECTION_SAMPLING),
        replace(base, mode=CorrectionMode.CANDIDATE_SELECTION, candidates=candidates),
        replace(base, mode=CorrectionMode.LAST_TOKEN_ONLY),
    ]


def grid_configs(base: CorrectionConfig, thresholds: Sequence[float], lengths: Sequence[int]) -> List[CorrectionConfig]:
    return [
        replace(base, mode=CorrectionMode.FULL_TRACE, threshold=float(t), max_len=int(c))
        for t in thresholds
        for c in lengths
    ]


def ablate(
    scenarios: Sequence[Scenario],
    checkpoints: Checkpoints,
    thresholds: Sequence[float],
    lengths: Sequence[int],
    base_cfg: CorrectionConfig = CorrectionConfig(),
    agent_mode: str = "idm",
    seed: int = 0,
    sim_cfg: SimConfig = SimConfig(),
    workers: int = 1,
    policies: Optional[Dict[str, EgoPolicy]] = None,
    out_csv: Optional[Path] = None,
    records_dir: Optional[Path] = None,
    on_log: Optional[Callable[[str], None]] = None,
) -> EvalReport:
    """Threshold x correction-length grid plus the baseline rows.

    Args:
        policies: extra named policy checkpoints; each gets an ``off`` and a ``full_trace`` row at
            the base configuration (e.g. the imitation policy, the RL policy without correction).
    """
    configs = grid_configs(base_cfg, thresholds, lengths) + baseline_configs(base_cfg)
    # fail before the first rollout rather than midway through the grid
    for cfg in configs:
        check_trace_capacity(cfg, checkpoints.policy.dims.max_trace)
    for name in sorted(policies or {}):
        check_trace_capacity(replace(base_cfg, mode=CorrectionMode.FULL_TRACE), policies[name].dims.max_trace, name)

    report = EvalReport()
    evaluator = Evaluator(scenarios, checkpoints, sim_cfg, seed, workers, records_dir)
    if on_log:
        evaluator.on_log(on_log)
    for cfg in configs:
        report.rows.extend(evaluator.evaluate(cfg, agent_mode))
    for name in sorted(policies or {}):
        named = Evaluator(scenarios, checkpoints.with_policy(policies[name]), sim_cfg, seed, workers, records_dir)
        if on_log:
            named.on_log(on_log)
        for mode in (CorrectionMode.OFF, CorrectionMode.FULL_TRACE):
            report.rows.extend(named.evaluate(replace(base_cfg, mode=mode), agent_mode, label=name))
    if out_csv is not None:
        report.to_csv(out_csv)
    return report
