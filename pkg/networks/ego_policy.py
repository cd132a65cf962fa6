"""
Autoregressive ego policy.

The trace encoder shares the token embedding table with the history branch: correction tokens are
ordinary motion tokens. An empty trace encodes to an exact zero vector, so the uncorrected proposal
does not depend on any trace-encoder parameter.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from nn import LayerKind, LayerSpec, ParamStore, backward, forward, init_graph
from nn.layers import linear, mlp, softmax
from nn.losses import batch_cross_entropy
from tokenizer import TokenVocabulary

from .common import (
    AgentEncoder,
    ModelError,
    NetworkDims,
    SetEncoder,
    check_targets,
    dims_from_meta,
    dims_meta,
    load_model,
    save_model,
)
from .features import MAP_FEATURES, NEIGHBOR_FEATURES, ContextBatch, EgoContext, FeatureDims, stack_ego_contexts

PREFIX = "pi"


class EgoPolicy:
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
        h, e = dims.hidden, dims.embed
        self.encoder = AgentEncoder(PREFIX, len(vocab), dims, features)
        self.route = SetEncoder(f"{PREFIX}.route", MAP_FEATURES, h)
        self.predicted = SetEncoder(f"{PREFIX}.pred", NEIGHBOR_FEATURES, h)
        self.trace_pos = LayerSpec(LayerKind.EMBEDDING, f"{PREFIX}.trace_pos", dims.max_trace, e)
        self.trace_attn = [
            LayerSpec(LayerKind.SELF_ATTENTION, f"{PREFIX}.trace_attn", e, e),
            LayerSpec(LayerKind.MEAN_POOL, f"{PREFIX}.trace_pool"),
        ]
        self.fusion = mlp(f"{PREFIX}.fuse", [self.encoder.width + 2 * h + e, h, h])
        self.head = [linear(f"{PREFIX}.head", h, len(vocab))]
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            self.encoder.init(store, rng)
            self.route.init(store, rng)
            self.predicted.init(store, rng)
            init_graph(store, [self.trace_pos], rng)
            init_graph(store, self.trace_attn, rng)
            init_graph(store, self.fusion, rng)
            init_graph(store, self.head, rng, zero=True)
        self.store = store

    @property
    def pad_id(self) -> int:
        return self.vocab.pad_id

    def frozen(self) -> "EgoPolicy":
        return EgoPolicy(self.vocab, self.dims, self.features, self.store.frozen_copy())

    def copy(self) -> "EgoPolicy":
        return EgoPolicy(self.vocab, self.dims, self.features, self.store.copy())

    def _check_traces(self, contexts: Sequence[EgoContext]) -> None:
        for ctx in contexts:
            if len(ctx.trace) > self.dims.max_trace:
                raise ModelError(f"Correction trace of length {len(ctx.trace)} exceeds {self.dims.max_trace}")
            for tok in ctx.trace:
                if not 0 <= tok < len(self.vocab):
                    raise ModelError(f"Trace token {tok} outside the vocabulary")

    # trace encoder

    def _trace_forward(self, batch: ContextBatch) -> Tuple[np.ndarray, Dict[str, Any]]:
        ids, mask = batch.extras["trace_ids"], batch.extras["trace_mask"]
        tok, tok_cache = forward(self.store, [self.encoder.embedding], ids)
        positions = np.broadcast_to(np.arange(self.dims.max_trace), ids.shape)
        pos, pos_cache = forward(self.store, [self.trace_pos], positions)
        pooled, attn_cache = forward(self.store, self.trace_attn, tok + pos, mask)
        return pooled, {"tok": tok_cache, "pos": pos_cache, "attn": attn_cache}

    def _trace_backward(self, cache: Dict[str, Any], dy: np.ndarray, grads: Dict[str, np.ndarray]) -> None:
        dx = backward(self.store, self.trace_attn, cache["attn"], dy, grads)
        backward(self.store, [self.encoder.embedding], cache["tok"], dx, grads)
        backward(self.store, [self.trace_pos], cache["pos"], dx, grads)

    def encode_trace(self, trace: Sequence[int]) -> np.ndarray:
        """Fixed-size trace embedding; the empty trace maps to zeros."""
        ctx_stub = _trace_only_batch([tuple(trace)], self.pad_id, self.dims.max_trace)
        pooled, _ = self._trace_forward(ctx_stub)
        return pooled[0]

    # full network

    def forward_batch(self, contexts: Sequence[EgoContext]) -> Tuple[np.ndarray, Dict[str, Any]]:
        """Probabilities (B, V) and the cache needed by :meth:`backward_logits`."""
        self._check_traces(contexts)
        batch = stack_ego_contexts(contexts, self.pad_id, self.dims.max_trace)
        agent, enc_cache = self.encoder.forward(self.store, batch)
        route, route_cache = self.route.forward(self.store, batch.extras["route"], batch.extras["route_mask"])
        pred, pred_cache = self.predicted.forward(self.store, batch.extras["predicted"], batch.extras["predicted_mask"])
        trace, trace_cache = self._trace_forward(batch)
        fused, fuse_cache = forward(self.store, self.fusion, np.concatenate([agent, route, pred, trace], axis=1))
        logits, head_cache = forward(self.store, self.head, fused)
        cache = {
            "enc": enc_cache,
            "route": route_cache,
            "pred": pred_cache,
            "trace": trace_cache,
            "fuse": fuse_cache,
            "head": head_cache,
        }
        return softmax(logits), cache

    def backward_logits(self, cache: Dict[str, Any], d_logits: np.ndarray) -> Dict[str, np.ndarray]:
        """Parameter gradients for a given gradient with respect to the logits."""
        grads: Dict[str, np.ndarray] = {}
        h = self.dims.hidden
        d_fused = backward(self.store, self.head, cache["head"], d_logits, grads)
        d_in = backward(self.store, self.fusion, cache["fuse"], d_fused, grads)
        width = self.encoder.width
        self.encoder.backward(self.store, cache["enc"], d_in[:, :width], grads)
        self.route.backward(self.store, cache["route"], d_in[:, width : width + h], grads)
        self.predicted.backward(self.store, cache["pred"], d_in[:, width + h : width + 2 * h], grads)
        self._trace_backward(cache["trace"], d_in[:, width + 2 * h :], grads)
        return grads

    def propose(self, ctx: EgoContext) -> np.ndarray:
        probs, _ = self.forward_batch([ctx])
        return probs[0]

    def propose_batch(self, contexts: Sequence[EgoContext]) -> np.ndarray:
        probs, _ = self.forward_batch(contexts)
        return probs

    def _ce_loss_and_grads(self, contexts: Sequence[EgoContext], targets: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
        targets = check_targets(np.asarray(targets), len(self.vocab))
        probs, cache = self.forward_batch(contexts)
        loss, d_logits = batch_cross_entropy(probs, targets)
        return loss, self.backward_logits(cache, d_logits)

    def imitation_loss_and_grads(self, contexts: Sequence[EgoContext], expert_tokens: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
        """L_imitation over contexts with an empty trace."""
        if any(ctx.trace for ctx in contexts):
            raise ModelError("Imitation contexts must carry an empty correction trace")
        return self._ce_loss_and_grads(contexts, expert_tokens)

    def correction_loss_and_grads(self, contexts: Sequence[EgoContext], expert_tokens: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
        """L_corr: expert token under each unsafe trace prefix."""
        return self._ce_loss_and_grads(contexts, expert_tokens)

    def save(self, path: Path) -> None:
        save_model(self.store, path, "ego_policy", self.vocab, dims_meta(self.dims, self.features))

    @staticmethod
    def load(path: Path, vocab: TokenVocabulary) -> "EgoPolicy":
        store, meta = load_model(path, "ego_policy", vocab)
        dims, features = dims_from_meta(meta)
        return EgoPolicy(vocab, dims, features, store)


def _trace_only_batch(traces: Sequence[Tuple[int, ...]], pad_id: int, max_trace: int) -> ContextBatch:
    if any(len(t) > max_trace for t in traces):
        raise ModelError(f"Correction trace exceeds {max_trace} tokens")
    ids = np.full((len(traces), max_trace), pad_id, dtype=np.int64)
    mask = np.zeros((len(traces), max_trace))
    for row, trace in enumerate(traces):
        ids[row, : len(trace)] = trace
        mask[row, : len(trace)] = 1.0
    empty = np.zeros((len(traces), 0))
    return ContextBatch(empty, empty, empty, empty, empty, empty, {"trace_ids": ids, "trace_mask": mask})
