"""Building blocks shared by the three networks: set encoders, the agent encoder and checkpoint sidecars."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from models import PlannerError
from nn import LayerKind, LayerSpec, ParamStore, backward, forward, init_graph
from nn.checkpoint import load_checkpoint, save_checkpoint, store_digest
from nn.layers import mlp
from tokenizer import TokenVocabulary, vocabulary_digest

from .features import MAP_FEATURES, NEIGHBOR_FEATURES, ContextBatch, FeatureDims


class ModelError(PlannerError):
    pass


@dataclass(frozen=True)
class NetworkDims:
    embed: int = 32
    hidden: int = 64
    max_trace: int = 10

    def __post_init__(self) -> None:
        if self.embed < 1 or self.hidden < 1 or self.max_trace < 1:
            raise ValueError("Network dimensions must be positive")


class SetEncoder:
    """Per-element MLP followed by a masked mean pool."""

    def __init__(self, name: str, in_dim: int, hidden: int) -> None:
        self.graph: List[LayerSpec] = mlp(name, [in_dim, hidden, hidden]) + [
            LayerSpec(LayerKind.MEAN_POOL, f"{name}.pool")
        ]

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        init_graph(store, self.graph, rng)

    def forward(self, store: ParamStore, x: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, list]:
        return forward(store, self.graph, x, mask)

    def backward(self, store: ParamStore, caches: list, dy: np.ndarray, grads: Dict[str, np.ndarray]) -> None:
        backward(store, self.graph, caches, dy, grads)


class AgentEncoder:
    """History embedding + kinematics context MLP, neighbor and map set encoders.

    Output width is ``3 * hidden``. The token embedding table is exposed as ``embedding`` so other
    branches can share it.
    """

    def __init__(self, prefix: str, vocab_size: int, dims: NetworkDims, features: FeatureDims) -> None:
        self.features = features
        self.dims = dims
        self.embedding = LayerSpec(LayerKind.EMBEDDING, f"{prefix}.tok_embed", vocab_size + 1, dims.embed)
        self.context = mlp(f"{prefix}.ctx", [features.history * dims.embed + 2, dims.hidden])
        self.neighbors = SetEncoder(f"{prefix}.nb", NEIGHBOR_FEATURES, dims.hidden)
        self.map = SetEncoder(f"{prefix}.map", MAP_FEATURES, dims.hidden)

    @property
    def width(self) -> int:
        return 3 * self.dims.hidden

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        init_graph(store, [self.embedding], rng)
        init_graph(store, self.context, rng)
        self.neighbors.init(store, rng)
        self.map.init(store, rng)

    def forward(self, store: ParamStore, batch: ContextBatch) -> Tuple[np.ndarray, Dict[str, Any]]:
        emb, emb_cache = forward(store, [self.embedding], batch.history)
        flat = np.concatenate([emb.reshape(len(batch), -1), batch.kinematics], axis=1)
        ctx, ctx_cache = forward(store, self.context, flat)
        nb, nb_cache = self.neighbors.forward(store, batch.neighbors, batch.neighbor_mask)
        mp, map_cache = self.map.forward(store, batch.map_points, batch.map_mask)
        cache = {"emb": emb_cache, "emb_shape": emb.shape, "ctx": ctx_cache, "nb": nb_cache, "map": map_cache}
        return np.concatenate([ctx, nb, mp], axis=1), cache

    def backward(self, store: ParamStore, cache: Dict[str, Any], dy: np.ndarray, grads: Dict[str, np.ndarray]) -> None:
        h = self.dims.hidden
        d_flat = backward(store, self.context, cache["ctx"], dy[:, :h], grads)
        self.neighbors.backward(store, cache["nb"], dy[:, h : 2 * h], grads)
        self.map.backward(store, cache["map"], dy[:, 2 * h :], grads)
        width = int(np.prod(cache["emb_shape"][1:]))
        d_emb = d_flat[:, :width].reshape(cache["emb_shape"])
        backward(store, [self.embedding], cache["emb"], d_emb, grads)


def check_targets(targets: np.ndarray, vocab_size: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab_size):
        raise ModelError("Target token id outside the vocabulary", {"vocab_size": vocab_size})
    return targets


def save_model(store: ParamStore, path: Path, kind: str, vocab: TokenVocabulary, meta: Dict[str, Any]) -> None:
    """Checkpoint plus a ``.json`` sidecar that pins the vocabulary."""
    path = Path(path)
    save_checkpoint(store, path)
    sidecar = {"kind": kind, "vocab_digest": vocabulary_digest(vocab), "vocab_size": len(vocab), **meta}
    tmp_path = path.with_suffix(".json.tmp")
    tmp_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2), encoding="utf-8")
    tmp_path.replace(path.with_suffix(".json"))


def load_model(path: Path, kind: str, vocab: Optional[TokenVocabulary]) -> Tuple[ParamStore, Dict[str, Any]]:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise ModelError(f"Missing model sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    if sidecar.get("kind") != kind:
        raise ModelError(f"Checkpoint {path} holds a {sidecar.get('kind')} model, expected {kind}")
    if vocab is not None and sidecar.get("vocab_digest") != vocabulary_digest(vocab):
        raise ModelError(
            "Model was trained with a different vocabulary",
            {"checkpoint": str(path), "expected": vocabulary_digest(vocab), "found": sidecar.get("vocab_digest")},
        )
    return load_checkpoint(path), sidecar


def dims_meta(dims: NetworkDims, features: FeatureDims) -> Dict[str, Any]:
    return {"dims": asdict(dims), "features": asdict(features)}


def dims_from_meta(meta: Dict[str, Any]) -> Tuple[NetworkDims, FeatureDims]:
    return NetworkDims(**meta.get("dims", {})), FeatureDims(**meta.get("features", {}))


__all__ = ["AgentEncoder", "ModelError", "NetworkDims", "SetEncoder", "check_targets", "load_model",
           "save_model", "store_digest"]
