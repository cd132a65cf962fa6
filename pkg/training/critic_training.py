"""Collision-critic training from policy rollouts: label, rebalance, fit, calibrate."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import Scenario
from networks.collision_critic import (
    CollisionCritic,
    CriticCalibration,
    CriticDataError,
    CriticSample,
    balance,
    calibrate,
    label_rollouts,
)
from networks.ego_policy import EgoPolicy
from networks.world_model import WorldModel
from nn.params import adam_update, cosine_lr
from planning.correction import CorrectionConfig, CorrectionMode, Sampling
from planning.rollout import rollout
from simulation.engine import AgentMode, SimConfig
from simulation.record import RolloutRecord

from .common import LoggingEngine, check_finite, write_csv

CALIBRATION_COLUMNS = ["threshold", "precision", "recall", "ttc_first_flag", "n_pos", "n_neg", "flagged_rate"]
SWEEP_COLUMNS = ["k", "accuracy", "precision", "recall", "n_pos", "n_neg"]


@dataclass(frozen=True)
class CriticConfig:
    k: int = 5
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    holdout: float = 0.2
    thresholds: Tuple[float, ...] = (0.0, 0.7, 0.75, 0.8)
    rollouts_per_scenario: int = 2
    temperature: float = 1.0
    agent_mode: AgentMode = AgentMode.WORLD_MODEL
    workers: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must be in [0, 1)")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))


def collect_critic_rollouts(
    policy: EgoPolicy,
    world_model: WorldModel,
    scenarios: Sequence[Scenario],
    cfg: CriticConfig,
) -> List[RolloutRecord]:
    """Uncorrected, sampled policy rollouts over the full horizon (no early stop)."""
    off = CorrectionConfig(mode=CorrectionMode.OFF, sampling=Sampling.TEMPERATURE, temperature=cfg.temperature)
    jobs = [(s, r) for s in range(len(scenarios)) for r in range(cfg.rollouts_per_scenario)]

    def run(job: Tuple[int, int]) -> RolloutRecord:
        s, r = job
        scenario = scenarios[s]
        sim = SimConfig(agent_mode=cfg.agent_mode, horizon_tokens=scenario.horizon_tokens,
                        world_model_temperature=cfg.temperature)
        return rollout(scenario, policy, None, off, world_model, sim, cfg.seed * 100_003 + s * 101 + r)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


def split_rollouts(rollouts: Sequence[RolloutRecord], holdout: float) -> Tuple[List[RolloutRecord], List[RolloutRecord]]:
    """Split by rollout so no validation sample shares a trajectory with training data."""
    if holdout <= 0.0:
        return list(rollouts), []
    stride = max(2, int(round(1.0 / holdout)))
    train = [r for i, r in enumerate(rollouts) if i % stride != stride - 1]
    val = [r for i, r in enumerate(rollouts) if i % stride == stride - 1]
    return train, val


@dataclass
class CriticTrainingResult:
    losses: List[Dict[str, float]] = field(default_factory=list)
    calibration: List[CriticCalibration] = field(default_factory=list)
    val_accuracy: float = float("nan")


def fit_critic(
    critic: CollisionCritic,
    samples: Sequence[CriticSample],
    cfg: CriticConfig,
    on_log=None,
) -> List[Dict[str, float]]:
    """Minibatch AdamW on the binary cross-entropy; returns one loss row per epoch."""
    if not samples:
        raise CriticDataError("No critic samples to train on")
    features = np.stack([s.features for s in samples])
    labels = np.array([s.label for s in samples], dtype=float)
    rng = np.random.default_rng(cfg.seed)
    n_batches = max(1, int(np.ceil(len(samples) / cfg.batch_size)))
    total = cfg.epochs * n_batches
    rows: List[Dict[str, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, grads = critic.loss_and_grads(features[idx], labels[idx])
            check_finite("critic", step, {"bce": loss}, grads)
            adam_update(critic.store, grads, cosine_lr(cfg.lr, step, total), weight_decay=cfg.weight_decay)
            epoch_loss += loss * len(idx)
            step += 1
        full_loss, _ = critic.loss_and_grads(features, labels)
        rows.append({"epoch": epoch, "batch_loss": epoch_loss / len(samples), "loss": full_loss})
        if on_log:
            on_log(f"critic epoch {epoch + 1}/{cfg.epochs}: loss {full_loss:.4f}")
    return rows


def accuracy(critic: CollisionCritic, samples: Sequence[CriticSample], threshold: float = 0.5) -> float:
    if not samples:
        return float("nan")
    scores = critic.predict_collision_prob(np.stack([s.features for s in samples]))
    labels = np.array([s.label for s in samples])
    return float(np.mean((scores >= threshold).astype(int) == labels))


class CriticTrainer(LoggingEngine):
    def __init__(self, critic: CollisionCritic, config: CriticConfig) -> None:
        super().__init__()
        self.critic = critic
        self.config = config

    def run(
        self,
        rollouts: Sequence[RolloutRecord],
        loss_csv: Optional[Path] = None,
        calibration_csv: Optional[Path] = None,
    ) -> CriticTrainingResult:
        cfg = self.config
        vocab = self.critic.vocab
        train, val = split_rollouts(rollouts, cfg.holdout)
        samples = label_rollouts(train, cfg.k, vocab, self.critic.features)
        balanced = balance(samples, cfg.seed)
        self._log(
            f"Critic data: {len(samples)} samples from {len(train)} rollouts, "
            f"{sum(s.label for s in samples)} positive, {len(balanced)} after 1:1 balancing"
        )
        result = CriticTrainingResult()
        result.losses = fit_critic(self.critic, balanced, cfg, self._log)
        if val:
            val_samples = label_rollouts(val, cfg.k, vocab, self.critic.features)
            result.val_accuracy = accuracy(self.critic, val_samples)
            result.calibration = calibrate(self.critic, val, cfg.thresholds, cfg.k)
            self._log(f"Validation accuracy {result.val_accuracy:.3f} on {len(val_samples)} samples")
        if loss_csv is not None:
            write_csv(loss_csv, ["epoch", "batch_loss", "loss"], result.losses, "critic_loss")
        if calibration_csv is not None:
            write_csv(calibration_csv, CALIBRATION_COLUMNS, [calibration_row(c) for c in result.calibration],
                      "critic_calibration")
        return result


def calibration_row(c: CriticCalibration) -> Dict[str, float]:
    return {
        "threshold": c.threshold,
        "precision": c.precision,
        "recall": c.recall,
        "ttc_first_flag": c.ttc_first_flag,
        "n_pos": c.n_pos,
        "n_neg": c.n_neg,
        "flagged_rate": c.flagged_rate,
    }


def train_critic(
    rollouts: Sequence[RolloutRecord],
    critic: CollisionCritic,
    config: CriticConfig,
    out_dir: Optional[Path] = None,
    on_log=None,
) -> CriticTrainingResult:
    trainer = CriticTrainer(critic, config)
    if on_log:
        trainer.on_log(on_log)
    loss_csv = Path(out_dir) / "critic_loss.csv" if out_dir else None
    calibration_csv = Path(out_dir) / "critic_calibration.csv" if out_dir else None
    return trainer.run(rollouts, loss_csv, calibration_csv)


def sweep_critic_horizon(
    rollouts: Sequence[RolloutRecord],
    k_grid: Sequence[int],
    config: CriticConfig,
    critic_factory,
    out_csv: Optional[Path] = None,
) -> List[Dict[str, float]]:
    """Train one fresh critic per horizon k and report validation metrics at threshold 0.5."""
    rows: List[Dict[str, float]] = []
    train, val = split_rollouts(rollouts, config.holdout)
    for k in k_grid:
        cfg = replace(config, k=int(k))
        critic: CollisionCritic = critic_factory()
        fit_critic(critic, balance(label_rollouts(train, k, critic.vocab, critic.features), cfg.seed), cfg)
        val_samples = label_rollouts(val, k, critic.vocab, critic.features) if val else []
        cal = calibrate(critic, val, [0.5], k)[0] if val_samples else None
        rows.append({
            "k": int(k),
            "accuracy": accuracy(critic, val_samples),
            "precision": cal.precision if cal else float("nan"),
            "recall": cal.recall if cal else float("nan"),
            "n_pos": cal.n_pos if cal else 0,
            "n_neg": cal.n_neg if cal else 0,
        })
    if out_csv is not None:
        write_csv(out_csv, SWEEP_COLUMNS, rows, "critic_horizon_sweep")
    return rows
