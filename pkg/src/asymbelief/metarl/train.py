"""Actor-critic meta-training of the transformer agent, checkpoints and evaluation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..tasks import TaskSpec, Transcript, build_task
from .env import (EpisodeBatch, Trajectory, rollout, sample_training_task, split_episodes,
                  trajectory_transcripts)
from .network import AgentConfig, TransformerAgent

log = logging.getLogger(__name__)

LOG_COLUMNS = ("episode", "mean_reward", "loss", "entropy_coef")


class TrainingDiverged(RuntimeError):
    pass


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """``G[t] = rewards[t] + gamma * G[t + 1]`` along the last axis."""
    G = np.zeros_like(rewards, dtype=float)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        G[..., t] = acc
    return G


def entropy_schedule(episode: int, episodes_total: int, start: float = 1.0) -> float:
    """Linear decay from ``start`` at episode 0 to 0 at half the budget."""
    half = episodes_total / 2
    if half <= 0:
        return 0.0
    return start * max(0.0, 1.0 - episode / half)


def actor_critic_loss(logits: torch.Tensor, values: torch.Tensor, actions: torch.Tensor,
                      returns: torch.Tensor, mask: torch.Tensor, entropy_coef: float,
                      critic_weight: float = 0.5,
                      advantages: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Policy-gradient + critic + entropy loss averaged over unmasked steps.

    Masked steps (forced trials, padding) contribute nothing to any term.
    ``advantages`` defaults to ``returns - values`` with gradients stopped;
    passing a fixed tensor makes the loss an ordinary function of the
    weights (useful for finite-difference checks).
    """
    mask = mask.to(values.dtype)
    n = mask.sum()
    if n == 0:
        return (logits.sum() + values.sum()) * 0.0
    logp_all = torch.log_softmax(logits, dim=-1)
    logp = logp_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    entropy = -(logp_all.exp() * logp_all).sum(-1)
    err = returns - values
    adv = err.detach() if advantages is None else advantages
    per_step = -logp * adv + critic_weight * err.pow(2) - entropy_coef * entropy
    return (per_step * mask).sum() / n


def trajectory_loss(agent: TransformerAgent, traj: Trajectory, entropy_coef: float) -> torch.Tensor:
    cfg = agent.config
    dtype = next(agent.parameters()).dtype
    logits, values = agent(traj.inputs.to(dtype))
    earned = np.where(traj.mask, traj.rewards, 0.0)
    returns = torch.as_tensor(discounted_returns(earned, cfg.gamma), dtype=dtype)
    return actor_critic_loss(logits, values, torch.as_tensor(traj.actions), returns,
                             torch.as_tensor(traj.mask), entropy_coef, cfg.critic_weight)


@dataclass
class AgentCheckpoint:
    config: AgentConfig
    weights: dict[str, np.ndarray]
    episodes_done: int
    seed: int
    optimizer_state: dict = field(default_factory=dict, repr=False)
    rng_state: Optional[dict] = field(default=None, repr=False)

    def agent(self) -> TransformerAgent:
        net = TransformerAgent(self.config)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
        net.eval()
        return net

    def save(self, path) -> None:
        """Write an ``.npz`` container: named weight arrays plus a JSON metadata entry."""
        arrays = {f"w/{k}": v for k, v in self.weights.items()}
        opt_meta = None
        if self.optimizer_state:
            opt_meta = {"param_groups": self.optimizer_state["param_groups"], "state": {}}
            for idx, st in self.optimizer_state["state"].items():
                opt_meta["state"][str(idx)] = sorted(st)
                for key, val in st.items():
                    arrays[f"opt/{idx}/{key}"] = val.numpy() if torch.is_tensor(val) else np.asarray(val)
        meta = {
            "config": self.config.to_dict(),
            "episodes_done": self.episodes_done,
            "seed": self.seed,
            "shapes": {k: list(v.shape) for k, v in self.weights.items()},
            "optimizer": opt_meta,
            "rng_state": self.rng_state,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "AgentCheckpoint":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            weights = {k: data[f"w/{k}"] for k in meta["shapes"]}
            opt = {}
            if meta.get("optimizer"):
                om = meta["optimizer"]
                opt = {"param_groups": om["param_groups"], "state": {}}
                for idx, keys in om["state"].items():
                    opt["state"][int(idx)] = {k: torch.from_numpy(data[f"opt/{idx}/{k}"].copy()) for k in keys}
        return cls(AgentConfig.from_dict(meta["config"]), weights, meta["episodes_done"], meta["seed"],
                   opt, meta.get("rng_state"))


def _snapshot(agent, optimizer, config, episodes_done, seed, rng) -> AgentCheckpoint:
    weights = {k: v.detach().numpy().copy() for k, v in agent.state_dict().items()}
    opt_state = optimizer.state_dict()
    opt_state = {"param_groups": opt_state["param_groups"],
                 "state": {i: {k: (v.clone() if torch.is_tensor(v) else v) for k, v in st.items()}
                           for i, st in opt_state["state"].items()}}
    return AgentCheckpoint(config, weights, episodes_done, seed, opt_state, rng.bit_generator.state)


def train(config: AgentConfig, seed: int, log_path=None, resume: Optional[AgentCheckpoint] = None,
          progress: Optional[Callable[[int, float], None]] = None,
          until: Optional[int] = None) -> AgentCheckpoint:
    """Meta-train for ``config.episodes_total`` outer iterations.

    ``until`` stops early after that many iterations while keeping the
    schedule of the full budget, so the returned checkpoint can be resumed.

    Each iteration rolls out a batch of freshly sampled tasks with the current
    policy and takes one Adam step on the batch-mean loss. Training can resume
    from a checkpoint carrying optimizer and generator state; the log then
    continues at the next episode.
    """
    torch.manual_seed(seed)
    agent = TransformerAgent(config)
    optimizer = torch.optim.Adam(agent.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    start = 0
    if resume is not None:
        agent.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in resume.weights.items()})
        if resume.optimizer_state:
            optimizer.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start = resume.episodes_done
    stop = config.episodes_total if until is None else min(until, config.episodes_total)
    if stop <= start:
        log.warning("no training episodes to run (episodes_total=%d, done=%d)", config.episodes_total, start)

    fh = writer = None
    if log_path is not None:
        append = resume is not None and Path(log_path).exists()
        fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(LOG_COLUMNS)
    try:
        for episode in range(start, stop):
            coef = entropy_schedule(episode, config.episodes_total, config.entropy_start)
            batch = EpisodeBatch.from_episodes(
                [sample_training_task(config.task_id, rng) for _ in range(config.batch_size)])
            agent.eval()
            traj = rollout(agent, batch, rng)
            agent.train()
            loss = trajectory_loss(agent, traj, coef)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at episode {episode}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            mean_reward = float(traj.rewards[traj.mask].mean())
            if writer is not None:
                writer.writerow((episode + 1, f"{mean_reward:.6f}", f"{loss.item():.6f}", f"{coef:.6f}"))
                if (episode + 1) % 100 == 0:
                    fh.flush()
            if progress is not None:
                progress(episode + 1, mean_reward)
    finally:
        if fh is not None:
            fh.close()
    return _snapshot(agent, optimizer, config, max(start, stop), seed, rng)


def evaluate(checkpoint: AgentCheckpoint, tasks: Sequence[TaskSpec], rng: np.random.Generator,
             seeds: Optional[Sequence[int]] = None, greedy: bool = False) -> list[Transcript]:
    """Roll the frozen agent out on each task; one transcript per task."""
    if any(t.task_id != checkpoint.config.task_id for t in tasks):
        raise ValueError(f"checkpoint was trained on task {checkpoint.config.task_id}")
    agent = checkpoint.agent()
    episodes = [ep for t in tasks for ep in split_episodes(t)]
    traj = rollout(agent, EpisodeBatch.from_episodes(episodes), rng, greedy=greedy)
    return trajectory_transcripts(traj, tasks, seeds if seeds is not None else [None] * len(tasks))


def evaluate_runs(checkpoint: AgentCheckpoint, n_runs: int, seed: int, greedy: bool = False) -> list[Transcript]:
    """Evaluate on ``n_runs`` freshly built tasks, run ``i`` using task seed ``seed + i``."""
    seeds = [seed + i for i in range(n_runs)]
    tasks = [build_task(checkpoint.config.task_id, s) for s in seeds]
    return evaluate(checkpoint, tasks, np.random.default_rng(seed), seeds, greedy)
