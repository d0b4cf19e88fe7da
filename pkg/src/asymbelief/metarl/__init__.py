"""Meta-reinforcement-learning agent for the bandit tasks."""

from .env import EpisodeBatch, rollout, sample_training_task, split_episodes
from .network import AgentConfig, TransformerAgent
from .train import (AgentCheckpoint, actor_critic_loss, discounted_returns, entropy_schedule, evaluate,
                    evaluate_runs, train)

__all__ = [
    "AgentCheckpoint", "AgentConfig", "EpisodeBatch", "TransformerAgent", "actor_critic_loss",
    "discounted_returns", "entropy_schedule", "evaluate", "evaluate_runs", "rollout",
    "sample_training_task", "split_episodes", "train",
]
