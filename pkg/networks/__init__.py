"""
Learned components.

Key parts
---------
- features:         frame-relative, padded context layouts (AgentContext, EgoContext, critic vector)
- common:           set encoders, the shared agent encoder, model sidecars (vocabulary pinning)
- world_model:      reactive next-token predictor for every agent ("wm." parameters)
- ego_policy:       trace-conditioned ego proposal distribution ("pi." parameters)
- collision_critic: k-step collision classifier plus labelling/balancing/calibration ("qc." parameters)
"""

from .collision_critic import CollisionCritic, CriticCalibration, CriticDataError, CriticSample
from .common import ModelError, NetworkDims
from .ego_policy import EgoPolicy
from .features import AgentContext, EgoContext, FeatureDims
from .world_model import WorldModel

__all__ = [
    "AgentContext",
    "CollisionCritic",
    "CriticCalibration",
    "CriticDataError",
    "CriticSample",
    "EgoContext",
    "EgoPolicy",
    "FeatureDims",
    "ModelError",
    "NetworkDims",
    "WorldModel",
]
