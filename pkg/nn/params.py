"""Named parameter storage and the AdamW optimizer step."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from models import PlannerError


class ShapeError(PlannerError):
    pass


@dataclass
class ParamStore:
    """Parameter tensors by name plus per-parameter Adam moments and a shared step counter.

    Single-writer contract: readers may share a store, only one optimizer may update it.
    """
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.params[name]
        except KeyError:
            raise ShapeError(f"Unknown parameter: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.params))

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ShapeError(f"Duplicate parameter name: {name}")
        self.params[name] = np.asarray(value, dtype=np.float64)

    def names(self) -> List[str]:
        return sorted(self.params)

    def zero_grads(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.params.items()}

    def copy(self) -> "ParamStore":
        return copy.deepcopy(self)

    def frozen_copy(self) -> "ParamStore":
        """Parameters only, fresh optimizer state, arrays marked read-only."""
        clone = ParamStore(params={k: v.copy() for k, v in self.params.items()})
        for value in clone.params.values():
            value.setflags(write=False)
        return clone

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def accumulate(grads: Dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = np.array(value, dtype=np.float64)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def adam_update(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One AdamW step (decoupled weight decay) applied in place; returns the store."""
    beta1, beta2 = betas
    store.step += 1
    bias1 = 1.0 - beta1 ** store.step
    bias2 = 1.0 - beta2 ** store.step
    for name in sorted(store.params):
        param = store.params[name]
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match parameter {name} {param.shape}")
        m = store.first_moment.get(name)
        v = store.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        store.first_moment[name] = m
        store.second_moment[name] = v
        updated = param * (1.0 - lr * weight_decay) if weight_decay else param.copy()
        updated = updated - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        store.params[name] = updated
    return store


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` to 0 over ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    progress = min(1.0, max(0.0, step / total_steps))
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm
