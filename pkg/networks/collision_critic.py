"""
Collision critic: probability that the proposed token leads to a collision within the next k planning steps.

Also holds the data side of the critic: labelling executed tokens of stored rollouts, 1:1 rebalancing
and threshold calibration.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import PlannerError
from nn import ParamStore, backward, forward, init_graph
from nn.layers import linear, mlp
from nn.losses import binary_cross_entropy_logits, sigmoid
from simulation.record import RolloutRecord
from tokenizer import TokenVocabulary

from .common import NetworkDims, dims_from_meta, dims_meta, load_model, save_model
from .features import FeatureDims, critic_features

PREFIX = "qc"
# scores stay strictly below 1 so a threshold of 1.0 never flags
MAX_PROB = float(np.nextafter(1.0, 0.0))


class CriticDataError(PlannerError):
    pass


class CollisionCritic:
    def __init__(
        self,
        vocab: TokenVocabulary,
        dims: NetworkDims = NetworkDims(),
        features: FeatureDims = FeatureDims(),
        store: Optional[ParamStore] = None,
        seed: int = 0,
    ) -> None:
        self.vocab = vocab
        self.dims = dims
        self.features = features
        self.body = mlp(f"{PREFIX}.mlp", [features.critic_width, dims.hidden, dims.hidden])
        self.head = [linear(f"{PREFIX}.head", dims.hidden, 1)]
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            init_graph(store, self.body, rng)
            init_graph(store, self.head, rng, zero=True)
        self.store = store
        self.calls = 0
        self._calls_lock = threading.Lock()

    def logits(self, features: np.ndarray) -> Tuple[np.ndarray, list, list]:
        hidden, body_cache = forward(self.store, self.body, np.atleast_2d(features))
        logits, head_cache = forward(self.store, self.head, hidden)
        return logits.reshape(-1), body_cache, head_cache

    def predict_collision_prob(self, features: np.ndarray) -> np.ndarray:
        z, _, _ = self.logits(features)
        return np.minimum(sigmoid(z), MAX_PROB)

    def collision_prob(self, features: np.ndarray) -> float:
        """Scalar probability for one feature vector (the correction loop's entry point)."""
        with self._calls_lock:
            self.calls += 1
        return float(self.predict_collision_prob(features)[0])

    def loss_and_grads(self, features: np.ndarray, labels: Sequence[float]) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean binary cross-entropy (L_critic) and exact gradients."""
        z, body_cache, head_cache = self.logits(features)
        loss, dz = binary_cross_entropy_logits(z, np.asarray(labels, dtype=float))
        grads: Dict[str, np.ndarray] = {}
        d_hidden = backward(self.store, self.head, head_cache, dz.reshape(-1, 1), grads)
        backward(self.store, self.body, body_cache, d_hidden, grads)
        return loss, grads

    def save(self, path: Path) -> None:
        save_model(self.store, path, "collision_critic", self.vocab, dims_meta(self.dims, self.features))

    @staticmethod
    def load(path: Path, vocab: TokenVocabulary) -> "CollisionCritic":
        store, meta = load_model(path, "collision_critic", vocab)
        dims, features = dims_from_meta(meta)
        return CollisionCritic(vocab, dims, features, store)


@dataclass(frozen=True)
class CriticSample:
    features: np.ndarray
    label: int
    rollout: int
    step: int
    token: int


@dataclass(frozen=True)
class CriticCalibration:
    threshold: float
    precision: float
    recall: float
    ttc_first_flag: float
    true_pos: int
    false_pos: int
    false_neg: int
    true_neg: int

    @property
    def n_pos(self) -> int:
        return self.true_pos + self.false_neg

    @property
    def n_neg(self) -> int:
        return self.false_pos + self.true_neg

    @property
    def flagged_rate(self) -> float:
        total = self.n_pos + self.n_neg
        return (self.true_pos + self.false_pos) / total if total else 0.0

    @property
    def accuracy(self) -> float:
        total = self.n_pos + self.n_neg
        return (self.true_pos + self.true_neg) / total if total else 0.0


def window_labels(collision_flags: Sequence[bool], k: int) -> List[int]:
    """label[t] = 1 iff a collision happens in steps t..t+k-1 (truncated at the end)."""
    if k < 1:
        raise CriticDataError(f"Critic horizon k must be >= 1, got {k}", {"k": k})
    n = len(collision_flags)
    return [int(any(collision_flags[t : min(n, t + k)])) for t in range(n)]


def label_rollouts(
    rollouts: Sequence[RolloutRecord],
    k: int,
    vocab: TokenVocabulary,
    features: FeatureDims = FeatureDims(),
) -> List[CriticSample]:
    """One sample per executed token; rejected trace proposals never become samples."""
    samples: List[CriticSample] = []
    for r_idx, record in enumerate(rollouts):
        labels = window_labels(record.collision_flags, k)
        for step, label in zip(record.steps, labels):
            feats = critic_features(step.scene, step.ego_states, features)
            samples.append(CriticSample(feats, label, r_idx, step.step, step.executed))
    return samples


def balance(samples: Sequence[CriticSample], seed: int) -> List[CriticSample]:
    """Keep every positive and a seeded uniform subset of negatives of the same size."""
    positives = [s for s in samples if s.label == 1]
    negatives = [s for s in samples if s.label == 0]
    if not positives:
        raise CriticDataError(
            "No colliding samples to train the critic on; generate harder scenarios "
            "(more conflict archetypes) or collect more rollouts",
            {"samples": len(samples)},
        )
    if len(negatives) <= len(positives):
        return positives + negatives
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(negatives), size=len(positives), replace=False))
    return positives + [negatives[i] for i in keep]


def _first_flag_to_collision(scores: Sequence[float], flags: Sequence[bool], threshold: float) -> Optional[int]:
    if not any(flags):
        return None
    collision = flags.index(True)
    for t, score in enumerate(scores[: collision + 1]):
        if score >= threshold:
            return collision - t
    return None


def calibrate(
    critic: CollisionCritic,
    rollouts: Sequence[RolloutRecord],
    thresholds: Sequence[float],
    k: int,
) -> List[CriticCalibration]:
    """Precision, recall and time from first flag to collision per threshold.

    A sample counts as flagged when its score is ``>= threshold``, the same rule the correction loop uses.
    """
    samples = label_rollouts(rollouts, k, critic.vocab, critic.features)
    if not samples:
        return []
    scores = critic.predict_collision_prob(np.stack([s.features for s in samples]))
    labels = np.array([s.label for s in samples])
    per_rollout: Dict[int, List[float]] = {}
    for sample, score in zip(samples, scores):
        per_rollout.setdefault(sample.rollout, []).append(float(score))

    out: List[CriticCalibration] = []
    for threshold in thresholds:
        flagged = scores >= threshold
        tp = int(np.sum(flagged & (labels == 1)))
        fp = int(np.sum(flagged & (labels == 0)))
        fn = int(np.sum(~flagged & (labels == 1)))
        tn = int(np.sum(~flagged & (labels == 0)))
        ttcs = [
            ttc
            for r_idx, record in enumerate(rollouts)
            if (ttc := _first_flag_to_collision(per_rollout.get(r_idx, []), record.collision_flags, threshold)) is not None
        ]
        out.append(
            CriticCalibration(
                threshold=float(threshold),
                precision=tp / (tp + fp) if tp + fp else 0.0,
                recall=tp / (tp + fn) if tp + fn else 0.0,
                ttc_first_flag=float(np.mean(ttcs)) if ttcs else float("nan"),
                true_pos=tp,
                false_pos=fp,
                false_neg=fn,
                true_neg=tn,
            )
        )
    return out
