"""Finite-difference verification of every layer kind and every training loss on tiny random instances."""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from evaluation.suite import SuiteSpec, build_scenario
from networks.collision_critic import CollisionCritic
from networks.common import NetworkDims
from networks.ego_policy import EgoPolicy
from networks.world_model import WorldModel
from nn.gradcheck import check_store_gradients
from nn.layers import LayerKind, LayerSpec, backward, forward, init_graph, linear, relu
from nn.params import ParamStore
from tokenizer import TokenVocabulary, build_vocabulary, collect_segments

from .dataset import build_imitation_data
from .reinforce import reinforce_gradients

TOLERANCE = 1e-3
STEP = 1e-6
ATOL = 1e-7


def _layer_cases() -> Dict[str, Tuple[List[LayerSpec], Callable[[np.random.Generator], np.ndarray], bool]]:
    """name -> (graph, input factory, uses mask)."""
    return {
        "linear": ([linear("t.lin", 4, 3)], lambda r: r.normal(size=(5, 4)), False),
        "relu": ([linear("t.lin", 4, 6), relu("t.relu")], lambda r: r.normal(size=(5, 4)), False),
        "softmax": ([linear("t.lin", 4, 5), LayerSpec(LayerKind.SOFTMAX, "t.sm")], lambda r: r.normal(size=(3, 4)),
                    False),
        "embedding": ([LayerSpec(LayerKind.EMBEDDING, "t.emb", 7, 3), linear("t.lin", 3, 2)],
                      lambda r: r.integers(0, 7, size=(4, 3)), False),
        "mean_pool": ([linear("t.lin", 3, 4), LayerSpec(LayerKind.MEAN_POOL, "t.pool")],
                      lambda r: r.normal(size=(2, 5, 3)), True),
        "self_attention": ([LayerSpec(LayerKind.SELF_ATTENTION, "t.att", 4, 4), linear("t.lin", 4, 2)],
                           lambda r: r.normal(size=(2, 5, 4)), True),
    }


def check_layers(seed: int = 0) -> Dict[str, float]:
    """Max relative error per layer kind for the scalar loss ``sum(output * R)``."""
    results: Dict[str, float] = {}
    for name, (graph, make_input, masked) in _layer_cases().items():
        rng = np.random.default_rng(seed)
        store = ParamStore()
        init_graph(store, graph, rng)
        x = make_input(rng)
        mask = None
        if masked:
            mask = np.ones(x.shape[:-1], dtype=bool)
            mask[..., -2:] = False
        out, _ = forward(store, graph, x, mask)
        weights = rng.normal(size=out.shape)

        def loss() -> float:
            return float(np.sum(forward(store, graph, x, mask)[0] * weights))

        _, caches = forward(store, graph, x, mask)
        grads: Dict[str, np.ndarray] = {}
        backward(store, graph, caches, weights, grads)
        report = check_store_gradients(store, loss, grads, h=STEP, atol=ATOL)
        results[f"layer.{name}"] = max(report.values())
    return results


def _perturb(store: ParamStore, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move every parameter away from zero so zero-initialised heads pass gradient to the encoders."""
    for name in store.names():
        store.params[name] = store.params[name] + rng.normal(0.0, scale, store.params[name].shape)


def tiny_setup(seed: int = 0):
    """A two-step scenario, its vocabulary and the teacher-forced training data."""
    spec = SuiteSpec(counts={"lead_brake": 1}, seed=seed, horizon_tokens=2)
    scenario = build_scenario("lead_brake", 0, spec)
    vocab: TokenVocabulary = build_vocabulary(
        collect_segments([scenario.expert, *scenario.agent_logs]), radius=0.05, max_size=12
    )
    return scenario, vocab, build_imitation_data([scenario], vocab)


def check_losses(seed: int = 0) -> Dict[str, float]:
    """Max relative error per loss: world, imitation, correction, critic and the REINFORCE surrogate."""
    rng = np.random.default_rng(seed)
    _, vocab, data = tiny_setup(seed)
    dims = NetworkDims(embed=4, hidden=5, max_trace=3)
    results: Dict[str, float] = {}

    wm = WorldModel(vocab, dims, seed=seed)
    _perturb(wm.store, rng)
    contexts, targets = data.world_contexts[:3], data.world_targets[:3]
    _, grads = wm.loss_and_grads(contexts, targets)
    report = check_store_gradients(wm.store, lambda: wm.loss_and_grads(contexts, targets)[0], grads, h=STEP,
                                   atol=ATOL)
    results["loss.world"] = max(report.values())

    policy = EgoPolicy(vocab, dims, seed=seed)
    _perturb(policy.store, rng)
    ego = [s.context for s in data.ego_steps]
    experts = [s.expert_token for s in data.ego_steps]
    _, grads = policy.imitation_loss_and_grads(ego, experts)
    report = check_store_gradients(policy.store, lambda: policy.imitation_loss_and_grads(ego, experts)[0], grads,
                                   h=STEP, atol=ATOL)
    results["loss.imitation"] = max(report.values())

    traced = [c.with_trace([(i + 1) % len(vocab), i % len(vocab)]) for i, c in enumerate(ego)]
    _, grads = policy.correction_loss_and_grads(traced, experts)
    report = check_store_gradients(policy.store, lambda: policy.correction_loss_and_grads(traced, experts)[0], grads,
                                   h=STEP, atol=ATOL)
    results["loss.correction"] = max(report.values())

    critic = CollisionCritic(vocab, dims, seed=seed)
    _perturb(critic.store, rng)
    features = rng.normal(size=(6, critic.features.critic_width))
    labels = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    _, grads = critic.loss_and_grads(features, labels)
    report = check_store_gradients(critic.store, lambda: critic.loss_and_grads(features, labels)[0], grads, h=STEP,
                                   atol=ATOL)
    results["loss.critic"] = max(report.values())

    il_policy = policy.frozen()
    _perturb(policy.store, rng)
    terms = [(ctx, token, w) for ctx, token, w in zip(traced + ego, experts * 2, (0.7, -1.2, 0.4, 1.1))]
    for kl_weight, name in ((0.0, "loss.reinforce"), (0.5, "loss.reinforce_kl")):
        grads, _ = reinforce_gradients(policy, il_policy, terms, kl_weight)
        report = check_store_gradients(
            policy.store, lambda: reinforce_gradients(policy, il_policy, terms, kl_weight)[1].surrogate, grads,
            h=STEP, atol=ATOL,
        )
        results[name] = max(report.values())
    return results


def run_gradient_checks(seed: int = 0) -> Dict[str, object]:
    """JSON-ready summary: max relative error per check and whether all are within tolerance."""
    errors = {**check_layers(seed), **check_losses(seed)}
    return {"tolerance": TOLERANCE, "max_relative_error": errors, "passed": all(e <= TOLERANCE for e in errors.values())}
