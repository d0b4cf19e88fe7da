"""Batched episodes, step-input encoding and policy rollouts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from ..tasks import (BLOCK_TRIALS, DEFAULT_LABELS, FORCED, FREE, FULL, PARTIAL, REWARD_VALUES,
                     BlockSpec, TaskSpec, TrialRecord, Transcript, _forced_schedule)
from .network import INPUT_SIZES, TransformerAgent

N_CASINOS = 4
TASK1_EPISODE_LENGTH = 96


def sample_training_task(task_id: int, rng: np.random.Generator) -> TaskSpec:
    """Draw one training episode with win probabilities ~ Uniform(0, 1).

    Task 1 draws four casinos and a uniformly random casino per step; Tasks 2
    and 3 draw a single block whose trial schedule follows the task family.
    """
    rv = REWARD_VALUES.get(task_id)
    if rv is None:
        raise ValueError(f"unknown task_id {task_id!r}")
    if task_id == 1:
        ctx = rng.integers(0, N_CASINOS, size=TASK1_EPISODE_LENGTH)
        counts = np.bincount(ctx, minlength=N_CASINOS)
        probs = rng.random((N_CASINOS, 2))
        blocks = tuple(BlockSpec(i, tuple(probs[i]), PARTIAL, int(counts[i]), (None,) * int(counts[i]))
                       for i in range(N_CASINOS))
        seen = [0] * N_CASINOS
        schedule = []
        for c in ctx:
            schedule.append((int(c), seen[c]))
            seen[c] += 1
        return TaskSpec(1, blocks, rv, tuple(schedule))
    probs = tuple(rng.random(2))
    if task_id == 2:
        mode = FULL if rng.random() < 0.5 else PARTIAL
        kinds = _forced_schedule(rng, BLOCK_TRIALS // 2, BLOCK_TRIALS // 2)
        block = BlockSpec(0, probs, mode, BLOCK_TRIALS, kinds)
    else:
        n_forced = BLOCK_TRIALS if rng.random() < 0.5 else 0
        kinds = _forced_schedule(rng, BLOCK_TRIALS, n_forced)
        block = BlockSpec(0, probs, PARTIAL, BLOCK_TRIALS + n_forced, kinds)
    return TaskSpec(task_id, (block,), rv, tuple((0, t) for t in range(block.n_trials)))


def split_episodes(task: TaskSpec) -> list[TaskSpec]:
    """Episodes the agent plays with fresh memory: the whole run for Task 1, else one per block."""
    if task.task_id == 1:
        return [task]
    return [TaskSpec(task.task_id, (b,), task.reward_values, tuple((b.block_id, t) for t in range(b.n_trials)))
            for b in task.blocks]


@dataclass
class EpisodeBatch:
    task_id: int
    episodes: list[TaskSpec]
    ctx: np.ndarray        # (B, T) block position within the episode
    probs: np.ndarray      # (B, C, 2)
    forced: np.ndarray     # (B, T) forced option or -1
    full: np.ndarray       # (B, T) full-feedback flag
    valid: np.ndarray      # (B, T)
    length: np.ndarray     # (B,)
    reward_values: tuple[float, float]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ctx.shape

    @classmethod
    def from_episodes(cls, episodes: Sequence[TaskSpec]) -> "EpisodeBatch":
        task_id = episodes[0].task_id
        B = len(episodes)
        T = max(e.visits_total for e in episodes)
        C = max(len(e.blocks) for e in episodes)
        ctx = np.zeros((B, T), dtype=np.int64)
        probs = np.zeros((B, C, 2))
        forced = np.full((B, T), -1, dtype=np.int64)
        full = np.zeros((B, T), dtype=bool)
        valid = np.zeros((B, T), dtype=bool)
        length = np.zeros(B, dtype=np.int64)
        for i, e in enumerate(episodes):
            pos = {b.block_id: j for j, b in enumerate(e.blocks)}
            for j, b in enumerate(e.blocks):
                probs[i, j] = b.win_probs
            n = e.visits_total
            length[i] = n
            valid[i, :n] = True
            for t, (bid, trial) in enumerate(e.schedule):
                j = pos[bid]
                b = e.blocks[j]
                ctx[i, t] = j
                k = b.trial_kinds[trial]
                forced[i, t] = -1 if k is None else k
                full[i, t] = b.feedback_mode == FULL
        return cls(task_id, list(episodes), ctx, probs, forced, full, valid, length, episodes[0].reward_values)


def static_inputs(batch: EpisodeBatch) -> torch.Tensor:
    """Inputs known before any action: time index, casino code, trial-type bits.

    Layout: [prev action (2), prev reward (1), (Task 2: prev unchosen reward),
    time, Task 1: casino one-hot (4) | Tasks 2-3: current type (2), previous type (2)].
    Action and reward slots are filled in during the rollout.
    """
    B, T = batch.shape
    size = INPUT_SIZES[batch.task_id]
    x = np.zeros((B, T, size), dtype=np.float32)
    col = 3 + (batch.task_id == 2)
    x[:, :, col] = np.arange(T)[None, :] / batch.length[:, None]
    if batch.task_id == 1:
        x[np.arange(B)[:, None], np.arange(T)[None, :], col + 1 + batch.ctx] = 1.0
    else:
        bits = np.zeros((B, T, 2), dtype=np.float32)
        f = batch.forced
        bits[..., 0] = f == 0   # 10: forced left
        bits[..., 1] = f == 1   # 01: forced right
        x[:, :, col + 1:col + 3] = bits
        x[:, 1:, col + 3:col + 5] = bits[:, :-1]
    x[~batch.valid] = 0.0
    return torch.from_numpy(x)


@dataclass
class Trajectory:
    inputs: torch.Tensor      # (B, T, input_size)
    actions: np.ndarray       # (B, T)
    rewards: np.ndarray       # (B, T) observed reward of the played machine
    unchosen: np.ndarray      # (B, T) counterfactual reward, NaN when unobserved
    mask: np.ndarray          # (B, T) free and valid steps
    batch: EpisodeBatch


@torch.no_grad()
def rollout(agent: TransformerAgent, batch: EpisodeBatch, rng: np.random.Generator,
            greedy: bool = False) -> Trajectory:
    B, T = batch.shape
    x = static_inputs(batch)
    dtype = next(agent.parameters()).dtype
    x = x.to(dtype)
    win, lose = batch.reward_values
    actions = np.zeros((B, T), dtype=np.int64)
    rewards = np.zeros((B, T))
    unchosen = np.full((B, T), np.nan)
    rows = np.arange(B)
    cache: dict = {}
    for t in range(T):
        logits, _ = agent.step(x[:, t], cache)
        p0 = torch.softmax(logits, dim=-1)[:, 0].double().numpy()
        u = rng.random(B)
        a = (p0 < 0.5).astype(np.int64) if greedy else (u >= p0).astype(np.int64)
        f = batch.forced[:, t]
        a = np.where(f >= 0, f, a)
        pw = batch.probs[rows, batch.ctx[:, t], a]
        r = np.where(rng.random(B) < pw, win, lose)
        pw_other = batch.probs[rows, batch.ctx[:, t], 1 - a]
        r_other = np.where(rng.random(B) < pw_other, win, lose)
        ru = np.where(batch.full[:, t], r_other, np.nan)
        valid = batch.valid[:, t]
        actions[:, t] = np.where(valid, a, 0)
        rewards[:, t] = np.where(valid, r, 0.0)
        unchosen[:, t] = np.where(valid, ru, np.nan)
        if t + 1 < T:
            nxt = np.nonzero(valid & batch.valid[:, t + 1])[0]
            x[nxt, t + 1, a[nxt]] = 1.0
            x[nxt, t + 1, 2] = torch.as_tensor(r[nxt], dtype=dtype)
            if batch.task_id == 2:
                # partial feedback propagates a 0 placeholder
                x[nxt, t + 1, 3] = torch.as_tensor(np.nan_to_num(ru[nxt]), dtype=dtype)
    mask = batch.valid & (batch.forced < 0)
    return Trajectory(x, actions, rewards, unchosen, mask, batch)


def trajectory_transcripts(traj: Trajectory, tasks: Sequence[TaskSpec], seeds: Sequence[Optional[int]],
                           labels: tuple[str, str] = DEFAULT_LABELS) -> list[Transcript]:
    """Convert rollouts of ``split_episodes(task)`` for each task into transcripts.

    Episodes in ``traj.batch`` must be ordered run by run, as produced by
    ``split_episodes``.
    """
    out = []
    row = 0
    for run_id, (task, seed) in enumerate(zip(tasks, seeds)):
        records = []
        for ep in split_episodes(task):
            for t, (bid, trial) in enumerate(ep.schedule):
                block = ep.block(bid)
                a = int(traj.actions[row, t])
                ru = traj.unchosen[row, t]
                records.append(TrialRecord(
                    run_id=run_id,
                    block_id=bid,
                    trial_index=trial,
                    global_visit=t + 1 if task.task_id == 1 else trial + 1,
                    kind=FREE if block.trial_kinds[trial] is None else FORCED,
                    options=labels,
                    chosen=labels[a],
                    reward_chosen=float(traj.rewards[row, t]),
                    reward_unchosen=None if np.isnan(ru) else float(ru),
                    feedback_mode=block.feedback_mode,
                ))
            row += 1
        out.append(Transcript(task.task_id, "metarl", seed, records, run_id=run_id, task=task))
    return out
