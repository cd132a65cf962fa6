"""
Training package.

Key parts
---------
- dataset:         teacher-forced ego/world-model examples from scenario logs
- imitation:       Stage 1 joint pretraining (imitation + correction + world) and correction exposure
- reinforce:       Stage 2 REINFORCE with KL to the frozen imitation policy, rollout collection, rewards
- critic_training: collision-critic data collection, fitting, calibration and the horizon sweep
"""

from .common import TrainingDivergedError
from .critic_training import CriticConfig, train_critic
from .imitation import PretrainConfig, expose_corrections, pretrain
from .reinforce import RlConfig, collect_rollouts, compute_reward, reinforce_update

__all__ = [
    "CriticConfig",
    "PretrainConfig",
    "RlConfig",
    "TrainingDivergedError",
    "collect_rollouts",
    "compute_reward",
    "expose_corrections",
    "pretrain",
    "reinforce_update",
    "train_critic",
]
