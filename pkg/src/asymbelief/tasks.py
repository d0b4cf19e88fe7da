"""Two-alternative forced-choice task environments.

Three task families are supported:

* Task 1: four casinos with fixed win-probability pairs, 24 visits each,
  interleaved in random order (partial feedback, rewards 0.5/0.0 dollars).
* Task 2: 16 single-casino blocks of 40 trials, half partial and half full
  feedback, half high-reward and half low-reward; 20 trials per block are
  played by "someone else" (forced).
* Task 3: 12 blocks, six free-choice blocks of 40 trials and six mixed blocks
  of 80 trials with 40 forced trials (20 per machine); partial feedback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

FREE = "free"
FORCED = "forced"
PARTIAL = "partial"
FULL = "full"

TASK1_WIN_PROBS = ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75))
TASK1_VISITS_PER_CASINO = 24
HIGH_REWARD_PROBS = (0.9, 0.6)
LOW_REWARD_PROBS = (0.4, 0.1)
BLOCK_TRIALS = 40

REWARD_VALUES = {1: (0.5, 0.0), 2: (1.0, -1.0), 3: (1.0, -1.0)}

DEFAULT_LABELS = ("A", "B")

RECORD_FIELDS = (
    "run_id",
    "block_id",
    "trial_index",
    "global_visit",
    "kind",
    "options",
    "chosen",
    "reward_chosen",
    "reward_unchosen",
    "feedback_mode",
)


class TaskError(ValueError):
    pass


class TranscriptFormatError(ValueError):
    """Raised when a serialized transcript violates the record schema."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class BlockSpec:
    """One casino: a pair of machines and its trial schedule.

    ``trial_kinds[i]`` is ``None`` for a free trial and the forced option
    index (0 or 1) for a forced trial.
    """

    block_id: int
    win_probs: tuple[float, float]
    feedback_mode: str
    n_trials: int
    trial_kinds: tuple[Optional[int], ...]

    def __post_init__(self):
        if len(self.win_probs) != 2 or not all(0.0 <= p <= 1.0 for p in self.win_probs):
            raise TaskError(f"win_probs must be two probabilities, got {self.win_probs}")
        if self.feedback_mode not in (PARTIAL, FULL):
            raise TaskError(f"unknown feedback mode {self.feedback_mode!r}")
        if len(self.trial_kinds) != self.n_trials:
            raise TaskError("trial_kinds length must equal n_trials")
        if any(k not in (None, 0, 1) for k in self.trial_kinds):
            raise TaskError("trial kinds must be None (free) or a forced option 0/1")

    @property
    def n_forced(self) -> int:
        return sum(k is not None for k in self.trial_kinds)

    @property
    def n_free(self) -> int:
        return self.n_trials - self.n_forced

    @property
    def is_mixed(self) -> bool:
        return self.n_forced > 0

    @property
    def best_option(self) -> int:
        return int(np.argmax(self.win_probs))

    def to_dict(self) -> dict:
        return {
            "block_id": self.block_id,
            "win_probs": list(self.win_probs),
            "feedback_mode": self.feedback_mode,
            "n_trials": self.n_trials,
            "trial_kinds": list(self.trial_kinds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(
            block_id=int(d["block_id"]),
            win_probs=tuple(float(p) for p in d["win_probs"]),
            feedback_mode=d["feedback_mode"],
            n_trials=int(d["n_trials"]),
            trial_kinds=tuple(None if k is None else int(k) for k in d["trial_kinds"]),
        )


@dataclass(frozen=True)
class TaskSpec:
    """Full parameterization of one run of a task.

    ``schedule`` lists ``(block_id, trial_index)`` in the order trials are
    played. Task 1 interleaves its casinos; Tasks 2 and 3 play blocks one
    after another in block_id order.
    """

    task_id: int
    blocks: tuple[BlockSpec, ...]
    reward_values: tuple[float, float]
    schedule: tuple[tuple[int, int], ...]

    @property
    def visits_total(self) -> int:
        return len(self.schedule)

    def block(self, block_id: int) -> BlockSpec:
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        raise KeyError(block_id)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "reward_values": list(self.reward_values),
            "blocks": [b.to_dict() for b in self.blocks],
            "schedule": [list(s) for s in self.schedule],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            task_id=int(d["task_id"]),
            blocks=tuple(BlockSpec.from_dict(b) for b in d["blocks"]),
            reward_values=tuple(float(r) for r in d["reward_values"]),
            schedule=tuple((int(b), int(t)) for b, t in d["schedule"]),
        )


@dataclass(frozen=True)
class TrialRecord:
    run_id: int
    block_id: int
    trial_index: int
    global_visit: int
    kind: str
    options: tuple[str, str]
    chosen: str
    reward_chosen: float
    reward_unchosen: Optional[float]
    feedback_mode: str

    @property
    def chosen_index(self) -> int:
        return self.options.index(self.chosen)

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in RECORD_FIELDS}
        d["options"] = list(self.options)
        return d


@dataclass
class Transcript:
    """Behavioral record of one run.

    ``task`` carries the generating TaskSpec when known; it is needed for
    regret computations but not for model fitting.
    """

    task_id: int
    agent_tag: str
    seed: Optional[int]
    records: list[TrialRecord] = field(default_factory=list)
    run_id: int = 0
    task: Optional[TaskSpec] = None
    complete: bool = True

    def blocks(self) -> dict[int, list[TrialRecord]]:
        out: dict[int, list[TrialRecord]] = {}
        for r in self.records:
            out.setdefault(r.block_id, []).append(r)
        return out

    @property
    def n_free(self) -> int:
        return sum(r.kind == FREE for r in self.records)

    def select_blocks(self, feedback_mode: Optional[str] = None,
                      mixed: Optional[bool] = None) -> "Transcript":
        """Sub-transcript restricted to blocks matching the filters.

        ``mixed`` filters on whether a block contains forced trials; it is
        judged from the records, so it also works without ``task``.
        """
        by_block = self.blocks()
        keep = set()
        for bid, recs in by_block.items():
            if feedback_mode is not None and recs[0].feedback_mode != feedback_mode:
                continue
            if mixed is not None and any(r.kind == FORCED for r in recs) != mixed:
                continue
            keep.add(bid)
        task = self.task
        if task is not None:
            task = replace(
                task,
                blocks=tuple(b for b in task.blocks if b.block_id in keep),
                schedule=tuple(s for s in task.schedule if s[0] in keep),
            )
        return replace(self, records=[r for r in self.records if r.block_id in keep], task=task)


def _forced_schedule(rng: np.random.Generator, n_free: int, n_forced: int) -> tuple[Optional[int], ...]:
    if n_forced % 2:
        raise TaskError("forced trials must split evenly between the two machines")
    kinds: list[Optional[int]] = [None] * n_free + [0] * (n_forced // 2) + [1] * (n_forced // 2)
    order = rng.permutation(len(kinds))
    return tuple(kinds[i] for i in order)


def _shuffled_pair(rng: np.random.Generator, pair: tuple[float, float]) -> tuple[float, float]:
    return pair if rng.random() < 0.5 else (pair[1], pair[0])


def build_task(task_id: int, rng_seed: int) -> TaskSpec:
    """Build the TaskSpec for one run; deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    if task_id == 1:
        blocks = tuple(
            BlockSpec(i, probs, PARTIAL, TASK1_VISITS_PER_CASINO, (None,) * TASK1_VISITS_PER_CASINO)
            for i, probs in enumerate(TASK1_WIN_PROBS)
        )
        slots = np.repeat(np.arange(len(blocks)), TASK1_VISITS_PER_CASINO)
        slots = rng.permutation(slots)
        counters = [0] * len(blocks)
        schedule = []
        for b in slots:
            schedule.append((int(b), counters[b]))
            counters[b] += 1
        return TaskSpec(1, blocks, REWARD_VALUES[1], tuple(schedule))

    if task_id == 2:
        conditions = [(mode, probs) for mode in (PARTIAL, FULL)
                      for probs in (HIGH_REWARD_PROBS, LOW_REWARD_PROBS) for _ in range(4)]
        order = rng.permutation(len(conditions))
        blocks = []
        for block_id, ci in enumerate(order):
            mode, probs = conditions[ci]
            kinds = _forced_schedule(rng, BLOCK_TRIALS // 2, BLOCK_TRIALS // 2)
            blocks.append(BlockSpec(block_id, _shuffled_pair(rng, probs), mode, BLOCK_TRIALS, kinds))
    elif task_id == 3:
        conditions = [(mixed, probs) for mixed in (False, True)
                      for probs in (HIGH_REWARD_PROBS, LOW_REWARD_PROBS) for _ in range(3)]
        order = rng.permutation(len(conditions))
        blocks = []
        for block_id, ci in enumerate(order):
            mixed, probs = conditions[ci]
            n_forced = BLOCK_TRIALS if mixed else 0
            kinds = _forced_schedule(rng, BLOCK_TRIALS, n_forced)
            blocks.append(BlockSpec(block_id, _shuffled_pair(rng, probs), PARTIAL,
                                    BLOCK_TRIALS + n_forced, kinds))
    else:
        raise TaskError(f"unknown task_id {task_id!r}; expected 1, 2 or 3")

    schedule = tuple((b.block_id, t) for b in blocks for t in range(b.n_trials))
    return TaskSpec(task_id, tuple(blocks), REWARD_VALUES[task_id], schedule)


def sample_reward(block: BlockSpec, option: int, rng: np.random.Generator,
                  reward_values: tuple[float, float]) -> float:
    win, lose = reward_values
    return win if rng.random() < block.win_probs[option] else lose


def expected_regret(block: BlockSpec, chosen_option: int,
                    reward_values: tuple[float, float]) -> float:
    """Expected reward missed relative to the better machine of ``block``."""
    win, lose = reward_values
    return (max(block.win_probs) - block.win_probs[chosen_option]) * (win - lose)


def realized_regret(block: BlockSpec, chosen_option: int, reward_chosen: float,
                    reward_values: tuple[float, float]) -> float:
    """Expected reward of the best machine minus the reward actually received."""
    win, lose = reward_values
    best = max(block.win_probs)
    return best * win + (1.0 - best) * lose - reward_chosen


class TaskEnv:
    """Stateful environment stepping through one TaskSpec.

    Actions are option indices (0 or 1). On forced trials the action must be
    the forced option; ``current_forced`` exposes it.
    """

    def __init__(self, task: TaskSpec, rng: np.random.Generator, run_id: int = 0,
                 labels: Optional[dict[int, tuple[str, str]]] = None):
        self.task = task
        self.rng = rng
        self.run_id = run_id
        self.labels = labels or {b.block_id: DEFAULT_LABELS for b in task.blocks}
        self._blocks = {b.block_id: b for b in task.blocks}
        self._pos = 0
        self.records: list[TrialRecord] = []

    @property
    def done(self) -> bool:
        return self._pos >= len(self.task.schedule)

    @property
    def current(self) -> tuple[BlockSpec, int]:
        if self.done:
            raise TaskError("task is finished")
        block_id, trial_index = self.task.schedule[self._pos]
        return self._blocks[block_id], trial_index

    @property
    def current_forced(self) -> Optional[int]:
        block, t = self.current
        return block.trial_kinds[t]

    @property
    def global_visit(self) -> int:
        """1-based visit number as printed in prompts.

        Task 1 counts across casinos; Tasks 2-3 restart at each block.
        """
        if self.task.task_id == 1:
            return self._pos + 1
        return self.current[1] + 1

    def step(self, action: int) -> TrialRecord:
        block, t = self.current
        if action not in (0, 1):
            raise TaskError(f"action must be 0 or 1, got {action!r}")
        forced = block.trial_kinds[t]
        if forced is not None and action != forced:
            raise TaskError(f"trial {t} of block {block.block_id} forces option {forced}")
        rv = self.task.reward_values
        r_chosen = sample_reward(block, action, self.rng, rv)
        r_unchosen = None
        if block.feedback_mode == FULL:
            r_unchosen = sample_reward(block, 1 - action, self.rng, rv)
        options = self.labels[block.block_id]
        rec = TrialRecord(
            run_id=self.run_id,
            block_id=block.block_id,
            trial_index=t,
            global_visit=self.global_visit,
            kind=FREE if forced is None else FORCED,
            options=tuple(options),
            chosen=options[action],
            reward_chosen=r_chosen,
            reward_unchosen=r_unchosen,
            feedback_mode=block.feedback_mode,
        )
        self.records.append(rec)
        self._pos += 1
        return rec


# -- serialization ---------------------------------------------------------


def _header(tr: Transcript) -> dict:
    return {
        "transcript": {
            "run_id": tr.run_id,
            "task_id": tr.task_id,
            "agent_tag": tr.agent_tag,
            "seed": tr.seed,
            "complete": tr.complete,
            "task": tr.task.to_dict() if tr.task is not None else None,
        }
    }


def transcript_lines(transcripts: Iterable[Transcript]) -> Iterator[str]:
    for tr in transcripts:
        yield json.dumps(_header(tr))
        for rec in tr.records:
            yield json.dumps(rec.to_dict())


def dump_transcripts(transcripts: Iterable[Transcript], path) -> None:
    """Write transcripts as JSON lines: one header line per run, then one line per record."""
    with open(path, "w") as fh:
        for line in transcript_lines(transcripts):
            fh.write(line + "\n")


def _parse_record(d: dict, lineno: int) -> TrialRecord:
    if list(d) != list(RECORD_FIELDS):
        raise TranscriptFormatError(f"record fields must be {list(RECORD_FIELDS)}, got {list(d)}", lineno)
    try:
        rec = TrialRecord(
            run_id=int(d["run_id"]),
            block_id=int(d["block_id"]),
            trial_index=int(d["trial_index"]),
            global_visit=int(d["global_visit"]),
            kind=d["kind"],
            options=tuple(d["options"]),
            chosen=d["chosen"],
            reward_chosen=float(d["reward_chosen"]),
            reward_unchosen=None if d["reward_unchosen"] is None else float(d["reward_unchosen"]),
            feedback_mode=d["feedback_mode"],
        )
    except (TypeError, ValueError) as exc:
        raise TranscriptFormatError(str(exc), lineno) from None
    return rec


def validate_record(rec: TrialRecord, reward_values: Optional[Sequence[float]] = None,
                    lineno: Optional[int] = None) -> None:
    if rec.kind not in (FREE, FORCED):
        raise TranscriptFormatError(f"unknown kind {rec.kind!r}", lineno)
    if rec.feedback_mode not in (PARTIAL, FULL):
        raise TranscriptFormatError(f"unknown feedback_mode {rec.feedback_mode!r}", lineno)
    if len(rec.options) != 2 or rec.options[0] == rec.options[1]:
        raise TranscriptFormatError("options must be two distinct labels", lineno)
    if rec.chosen not in rec.options:
        raise TranscriptFormatError(f"chosen {rec.chosen!r} not in options {rec.options}", lineno)
    if (rec.reward_unchosen is not None) != (rec.feedback_mode == FULL):
        raise TranscriptFormatError("reward_unchosen must be present iff feedback_mode is full", lineno)
    if reward_values is not None:
        allowed = set(reward_values)
        if rec.reward_chosen not in allowed or (
                rec.reward_unchosen is not None and rec.reward_unchosen not in allowed):
            raise TranscriptFormatError(f"rewards must be in {sorted(allowed)}", lineno)


def validate_transcript(tr: Transcript) -> None:
    """Re-check record ordering and per-block counts against ``tr.task``."""
    last: dict[int, int] = {}
    for rec in tr.records:
        if rec.run_id != tr.run_id:
            raise TranscriptFormatError(f"record run_id {rec.run_id} != transcript run_id {tr.run_id}")
        if rec.trial_index != last.get(rec.block_id, -1) + 1:
            raise TranscriptFormatError(
                f"block {rec.block_id}: trial_index {rec.trial_index} out of order")
        last[rec.block_id] = rec.trial_index
    if tr.task is not None:
        for rec in tr.records:
            block = tr.task.block(rec.block_id)
            forced = block.trial_kinds[rec.trial_index]
            if (forced is None) != (rec.kind == FREE):
                raise TranscriptFormatError(f"block {rec.block_id} trial {rec.trial_index}: kind mismatch")
            if forced is not None and rec.chosen_index != forced:
                raise TranscriptFormatError(f"block {rec.block_id} trial {rec.trial_index}: forced option ignored")
            if block.feedback_mode != rec.feedback_mode:
                raise TranscriptFormatError(f"block {rec.block_id}: feedback_mode mismatch")
        if tr.complete:
            for b in tr.task.blocks:
                n = last.get(b.block_id, -1) + 1
                if n != b.n_trials:
                    raise TranscriptFormatError(
                        f"block {b.block_id} has {n} records, expected {b.n_trials}")


def load_transcripts(path) -> list[Transcript]:
    """Read and validate a JSON-lines transcript file."""
    transcripts: list[Transcript] = []
    current: Optional[Transcript] = None
    reward_values = None
    last_index: dict[int, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TranscriptFormatError(f"invalid JSON: {exc.msg}", lineno) from None
            if "transcript" in d:
                h = d["transcript"]
                task = TaskSpec.from_dict(h["task"]) if h.get("task") else None
                current = Transcript(
                    task_id=int(h["task_id"]), agent_tag=h["agent_tag"], seed=h.get("seed"),
                    run_id=int(h["run_id"]), task=task, complete=bool(h.get("complete", True)),
                )
                reward_values = task.reward_values if task else REWARD_VALUES.get(current.task_id)
                transcripts.append(current)
                last_index = {}
                continue
            if current is None:
                raise TranscriptFormatError("record before any transcript header", lineno)
            rec = _parse_record(d, lineno)
            validate_record(rec, reward_values, lineno)
            if rec.run_id != current.run_id:
                raise TranscriptFormatError("record run_id does not match header", lineno)
            if rec.trial_index != last_index.get(rec.block_id, -1) + 1:
                raise TranscriptFormatError("trial_index out of order within block", lineno)
            last_index[rec.block_id] = rec.trial_index
            current.records.append(rec)
    for tr in transcripts:
        validate_transcript(tr)
    return transcripts


def transcript_path(directory, run_id: int) -> Path:
    return Path(directory) / f"run_{run_id:03d}.jsonl"
