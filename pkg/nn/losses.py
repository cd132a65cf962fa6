"""Loss functions with their gradients with respect to the pre-activation logits."""

from __future__ import annotations

import math
from typing import Tuple

import numpy as np

from .layers import softmax

PROB_FLOOR = 1e-12


def cross_entropy(dist: np.ndarray, target: int) -> Tuple[float, np.ndarray, bool]:
    """-log dist[target] for a softmax output.

    Returns ``(loss, grad_logits, clamped)``; the logit gradient is ``dist - one_hot(target)`` and
    ``clamped`` reports that the target probability was floored at 1e-12.
    """
    dist = np.asarray(dist, dtype=float)
    if abs(float(np.sum(dist)) - 1.0) > 1e-6:
        raise ValueError(f"Distribution sums to {float(np.sum(dist))}, expected 1")
    if not (0 <= int(target) < dist.shape[-1]):
        raise ValueError(f"Target {target} outside distribution of size {dist.shape[-1]}")
    p = float(dist[int(target)])
    clamped = p < PROB_FLOOR
    loss = -math.log(max(p, PROB_FLOOR))
    grad = dist.copy()
    grad[int(target)] -= 1.0
    return loss, grad, clamped


def batch_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over rows; gradient w.r.t. the logits, already divided by the batch size."""
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    picked = np.maximum(probs[rows, targets], PROB_FLOOR)
    loss = float(-np.mean(np.log(picked)))
    grad = probs.copy()
    grad[rows, targets] -= 1.0
    return loss, grad / max(len(targets), 1)


def kl_categorical(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) = sum p_i ln(p_i / q_i) with 0 ln 0 = 0 and q floored at 1e-12."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), PROB_FLOOR)
    support = p > 0.0
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def kl_grad_logits(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Gradient of KL(p || softmax(z)) with respect to z, evaluated at q = softmax(z)."""
    return np.asarray(q, dtype=float) - np.asarray(p, dtype=float)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def binary_cross_entropy_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean BCE computed from logits (stable form); gradient ``(sigmoid(z) - y) / n``."""
    z = np.asarray(logits, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - y) / max(len(z), 1)
    return float(np.mean(loss)), grad


__all__ = [
    "batch_cross_entropy",
    "binary_cross_entropy_logits",
    "cross_entropy",
    "kl_categorical",
    "kl_grad_logits",
    "sigmoid",
    "softmax",
]
