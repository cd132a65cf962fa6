"""
Reactive multi-agent next-token predictor.

Every agent (ego included) is encoded from its own frame; the fused features go through a logits head
over the vocabulary. Frozen during reinforcement learning and used as the rollout simulator.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import AgentState, RoadMap
from nn import ParamStore, backward, forward, init_graph
from nn.layers import linear, mlp, softmax
from nn.losses import batch_cross_entropy
from simulation.scene import SceneState
from tokenizer import TokenVocabulary, decode

from .common import AgentEncoder, NetworkDims, check_targets, dims_from_meta, dims_meta, load_model, save_model
from .features import AgentContext, FeatureDims, build_agent_context, stack_agent_contexts

PREFIX = "wm"


class WorldModel:
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
        self.encoder = AgentEncoder(PREFIX, len(vocab), dims, features)
        self.fusion = mlp(f"{PREFIX}.fuse", [self.encoder.width, dims.hidden, dims.hidden])
        self.head = [linear(f"{PREFIX}.head", dims.hidden, len(vocab))]
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            self.encoder.init(store, rng)
            init_graph(store, self.fusion, rng)
            init_graph(store, self.head, rng, zero=True)
        self.store = store

    def frozen(self) -> "WorldModel":
        return WorldModel(self.vocab, self.dims, self.features, self.store.frozen_copy())

    def context(self, scene: SceneState, agent: int, road_map: RoadMap, dt: float) -> AgentContext:
        return build_agent_context(scene, agent, road_map, self.vocab, dt, self.features)

    def _forward(self, contexts: Sequence[AgentContext]) -> Tuple[np.ndarray, Dict[str, Any]]:
        batch = stack_agent_contexts(contexts)
        feat, enc_cache = self.encoder.forward(self.store, batch)
        fused, fuse_cache = forward(self.store, self.fusion, feat)
        logits, head_cache = forward(self.store, self.head, fused)
        return logits, {"enc": enc_cache, "fuse": fuse_cache, "head": head_cache}

    def predict_batch(self, contexts: Sequence[AgentContext]) -> np.ndarray:
        logits, _ = self._forward(contexts)
        return softmax(logits)

    def predict_dist(self, ctx: AgentContext) -> np.ndarray:
        """Next-token distribution for one agent."""
        return self.predict_batch([ctx])[0]

    def loss_and_grads(self, contexts: Sequence[AgentContext], targets: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean cross-entropy of the logged tokens (L_world) and its exact gradients."""
        targets = check_targets(np.asarray(targets), len(self.vocab))
        logits, cache = self._forward(contexts)
        loss, d_logits = batch_cross_entropy(softmax(logits), targets)
        grads: Dict[str, np.ndarray] = {}
        d_fused = backward(self.store, self.head, cache["head"], d_logits, grads)
        d_feat = backward(self.store, self.fusion, cache["fuse"], d_fused, grads)
        self.encoder.backward(self.store, cache["enc"], d_feat, grads)
        return loss, grads

    def sample_agents_step(
        self,
        scene: SceneState,
        road_map: RoadMap,
        dt: float,
        temperature: float,
        rng: np.random.Generator,
    ) -> List[int]:
        """One token per background agent (scene indices 1..N); temperature 0 takes the argmax."""
        if scene.num_agents < 2:
            return []
        probs = self.predict_batch([self.context(scene, j, road_map, dt) for j in range(1, scene.num_agents)])
        if temperature <= 0.0:
            return [int(np.argmax(p)) for p in probs]
        tokens = []
        for p in probs:
            scaled = np.power(p, 1.0 / temperature)
            tokens.append(int(rng.choice(len(p), p=scaled / scaled.sum())))
        return tokens

    def predicted_states(self, scene: SceneState, road_map: RoadMap, dt: float) -> Dict[int, AgentState]:
        """Decoded end state of each background agent's argmax token, keyed by scene index."""
        tokens = self.sample_agents_step(scene, road_map, dt, 0.0, np.random.default_rng(0))
        return {j: decode(tok, scene.agents[j], self.vocab, dt)[-1] for j, tok in enumerate(tokens, start=1)}

    def save(self, path: Path) -> None:
        save_model(self.store, path, "world_model", self.vocab, dims_meta(self.dims, self.features))

    @staticmethod
    def load(path: Path, vocab: TokenVocabulary) -> "WorldModel":
        store, meta = load_model(path, "world_model", vocab)
        dims, features = dims_from_meta(meta)
        return WorldModel(vocab, dims, features, store)
