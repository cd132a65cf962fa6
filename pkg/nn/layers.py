"""
Layer wiring and the forward/backward passes.

A graph is an ordered list of :class:`LayerSpec`. ``forward`` returns the output plus one cache per
layer; ``backward`` consumes those caches, accumulates parameter gradients into a dict and returns
the gradient with respect to the graph input (``None`` when the graph starts with an Embedding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import PlannerError

from .params import ParamStore, ShapeError, accumulate

MASK_BIAS = -1e9


class CacheMismatchError(PlannerError):
    pass


class LayerKind(Enum):
    LINEAR = "linear"
    RELU = "relu"
    SOFTMAX = "softmax"
    EMBEDDING = "embedding"
    MEAN_POOL = "mean_pool"
    SELF_ATTENTION = "self_attention"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a graph; ``name`` prefixes its parameters in the ParamStore."""
    kind: LayerKind
    name: str
    in_dim: int = 0
    out_dim: int = 0

    def param_names(self) -> List[str]:
        if self.kind == LayerKind.LINEAR:
            return [f"{self.name}.W", f"{self.name}.b"]
        if self.kind == LayerKind.EMBEDDING:
            return [f"{self.name}.table"]
        if self.kind == LayerKind.SELF_ATTENTION:
            return [f"{self.name}.Wq", f"{self.name}.Wk", f"{self.name}.Wv"]
        return []


def linear(name: str, in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(LayerKind.LINEAR, name, in_dim, out_dim)


def relu(name: str) -> LayerSpec:
    return LayerSpec(LayerKind.RELU, name)


def mlp(name: str, dims: Sequence[int], final_relu: bool = True) -> List[LayerSpec]:
    """Linear/ReLU stack through ``dims``."""
    out: List[LayerSpec] = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        out.append(linear(f"{name}.l{i}", a, b))
        if final_relu or i < len(dims) - 2:
            out.append(relu(f"{name}.r{i}"))
    return out


def init_graph(store: ParamStore, graph: Sequence[LayerSpec], rng: np.random.Generator, zero: bool = False) -> None:
    """Create the graph's parameters in ``store`` (uniform +-1/sqrt(fan_in); zeros when ``zero``)."""
    for spec in graph:
        if spec.kind == LayerKind.LINEAR:
            limit = 1.0 / math.sqrt(spec.in_dim)
            weight = np.zeros((spec.in_dim, spec.out_dim)) if zero else rng.uniform(-limit, limit, (spec.in_dim, spec.out_dim))
            store.add(f"{spec.name}.W", weight)
            store.add(f"{spec.name}.b", np.zeros(spec.out_dim))
        elif spec.kind == LayerKind.EMBEDDING:
            table = np.zeros((spec.in_dim, spec.out_dim)) if zero else rng.normal(0.0, 0.1, (spec.in_dim, spec.out_dim))
            store.add(f"{spec.name}.table", table)
        elif spec.kind == LayerKind.SELF_ATTENTION:
            limit = 1.0 / math.sqrt(spec.in_dim)
            for suffix in ("Wq", "Wk", "Wv"):
                store.add(f"{spec.name}.{suffix}", rng.uniform(-limit, limit, (spec.in_dim, spec.in_dim)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_last_dim(spec: LayerSpec, x: np.ndarray, dim: int) -> None:
    if x.ndim == 0 or x.shape[-1] != dim:
        raise ShapeError(f"Layer '{spec.name}' ({spec.kind.value}) expects last dim {dim}, got shape {x.shape}")


def _forward_layer(store: ParamStore, spec: LayerSpec, x: np.ndarray, mask: Optional[np.ndarray]) -> Tuple[np.ndarray, Dict[str, Any]]:
    cache: Dict[str, Any] = {"kind": spec.kind, "name": spec.name}
    if spec.kind == LayerKind.LINEAR:
        _check_last_dim(spec, x, spec.in_dim)
        cache["x"] = x
        return x @ store[f"{spec.name}.W"] + store[f"{spec.name}.b"], cache
    if spec.kind == LayerKind.RELU:
        cache["x"] = x
        return np.maximum(x, 0.0), cache
    if spec.kind == LayerKind.SOFTMAX:
        y = softmax(x)
        cache["y"] = y
        return y, cache
    if spec.kind == LayerKind.EMBEDDING:
        ids = np.asarray(x, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= spec.in_dim):
            raise ShapeError(f"Layer '{spec.name}' (embedding) got ids outside [0, {spec.in_dim})")
        cache["ids"] = ids
        return store[f"{spec.name}.table"][ids], cache
    if spec.kind == LayerKind.MEAN_POOL:
        if x.ndim < 2:
            raise ShapeError(f"Layer '{spec.name}' (mean_pool) needs a set axis, got shape {x.shape}")
        weights = np.ones(x.shape[:-1]) if mask is None else np.asarray(mask, dtype=float)
        if weights.shape != x.shape[:-1]:
            raise ShapeError(f"Layer '{spec.name}' (mean_pool) mask shape {weights.shape} vs input {x.shape}")
        counts = np.maximum(np.sum(weights, axis=-1, keepdims=True), 1.0)
        scale = weights / counts
        cache["scale"] = scale
        return np.sum(x * scale[..., None], axis=-2), cache
    if spec.kind == LayerKind.SELF_ATTENTION:
        _check_last_dim(spec, x, spec.in_dim)
        if x.ndim < 2:
            raise ShapeError(f"Layer '{spec.name}' (self_attention) needs a sequence axis, got shape {x.shape}")
        q = x @ store[f"{spec.name}.Wq"]
        k = x @ store[f"{spec.name}.Wk"]
        v = x @ store[f"{spec.name}.Wv"]
        scale = 1.0 / math.sqrt(spec.in_dim)
        scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
        if mask is not None:
            bias = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_BIAS)
            scores = scores + bias[..., None, :]
        attn = softmax(scores)
        cache.update(x=x, q=q, k=k, v=v, attn=attn, scale=scale)
        return np.matmul(attn, v), cache
    raise ShapeError(f"Unsupported layer kind: {spec.kind}")


def forward(
    store: ParamStore,
    graph: Sequence[LayerSpec],
    x: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, List[Dict[str, Any]]]:
    """Evaluate the graph; ``mask`` (valid-element flags over the set axis) feeds MeanPool and SelfAttention."""
    caches: List[Dict[str, Any]] = []
    out = x
    for spec in graph:
        out, cache = _forward_layer(store, spec, out, mask)
        caches.append(cache)
    return out, caches


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _backward_layer(store: ParamStore, spec: LayerSpec, cache: Dict[str, Any], dy: np.ndarray, grads: Dict[str, np.ndarray]) -> Optional[np.ndarray]:
    if cache.get("kind") != spec.kind or cache.get("name") != spec.name:
        raise CacheMismatchError(f"Cache for '{cache.get('name')}' does not belong to layer '{spec.name}'")
    if spec.kind == LayerKind.LINEAR:
        x = cache["x"]
        accumulate(grads, f"{spec.name}.W", _flat(x).T @ _flat(dy))
        accumulate(grads, f"{spec.name}.b", _flat(dy).sum(axis=0))
        return dy @ store[f"{spec.name}.W"].T
    if spec.kind == LayerKind.RELU:
        return dy * (cache["x"] > 0.0)
    if spec.kind == LayerKind.SOFTMAX:
        y = cache["y"]
        return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    if spec.kind == LayerKind.EMBEDDING:
        table = store[f"{spec.name}.table"]
        dtable = np.zeros_like(table)
        np.add.at(dtable, cache["ids"].reshape(-1), _flat(dy))
        accumulate(grads, f"{spec.name}.table", dtable)
        return None
    if spec.kind == LayerKind.MEAN_POOL:
        return dy[..., None, :] * cache["scale"][..., None]
    if spec.kind == LayerKind.SELF_ATTENTION:
        x, q, k, v, attn, scale = (cache[n] for n in ("x", "q", "k", "v", "attn", "scale"))
        d_attn = np.matmul(dy, np.swapaxes(v, -1, -2))
        dv = np.matmul(np.swapaxes(attn, -1, -2), dy)
        d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
        dq = np.matmul(d_scores, k) * scale
        dk = np.matmul(np.swapaxes(d_scores, -1, -2), q) * scale
        accumulate(grads, f"{spec.name}.Wq", _flat(x).T @ _flat(dq))
        accumulate(grads, f"{spec.name}.Wk", _flat(x).T @ _flat(dk))
        accumulate(grads, f"{spec.name}.Wv", _flat(x).T @ _flat(dv))
        return (
            dq @ store[f"{spec.name}.Wq"].T
            + dk @ store[f"{spec.name}.Wk"].T
            + dv @ store[f"{spec.name}.Wv"].T
        )
    raise ShapeError(f"Unsupported layer kind: {spec.kind}")


def backward(
    store: ParamStore,
    graph: Sequence[LayerSpec],
    caches: Sequence[Dict[str, Any]],
    dy: np.ndarray,
    grads: Dict[str, np.ndarray],
) -> Optional[np.ndarray]:
    """Back-propagate ``dy`` through the graph; parameter gradients are added into ``grads``."""
    if len(caches) != len(graph):
        raise CacheMismatchError(f"Graph has {len(graph)} layers but {len(caches)} caches were supplied")
    grad: Optional[np.ndarray] = dy
    for spec, cache in zip(reversed(graph), reversed(caches)):
        if grad is None:
            raise CacheMismatchError(f"No upstream gradient reaches layer '{spec.name}'")
        grad = _backward_layer(store, spec, cache, grad, grads)
    return grad
