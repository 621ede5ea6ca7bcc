"""DDPG guidance for the single-agent docking problem."""

from .env import (DockingEnv, DockingEnvConfig, EnvState, RewardParams, env_reset, env_step,
                  is_docked, reward, reward_terms)
from .learner import (Batch, DdpgHyperparams, DdpgNets, EpisodeMetrics, EvalResult, OuNoiseState,
                      ReplayBuffer, TrainResult, Transition, critic_targets, evaluate_policy,
                      exploration_prob, ou_step, select_action, train_ddpg, train_step)
from .nets import Adam, Mlp, soft_update

__all__ = [
    "Adam", "Batch", "DdpgHyperparams", "DdpgNets", "DockingEnv", "DockingEnvConfig", "EnvState",
    "EpisodeMetrics", "EvalResult", "Mlp", "OuNoiseState", "ReplayBuffer", "RewardParams",
    "TrainResult", "Transition", "critic_targets", "env_reset", "env_step", "evaluate_policy",
    "exploration_prob", "is_docked", "ou_step", "reward", "reward_terms", "select_action",
    "soft_update", "train_ddpg", "train_step",
]
