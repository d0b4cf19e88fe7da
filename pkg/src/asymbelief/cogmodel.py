"""Rescorla-Wagner model family.

Every model in the family is the same delta rule with a different map from
update context (chosen/unchosen target, free/forced trial, sign of the
prediction error) to a learning-rate slot. A slot of ``-1`` means outcomes in
that context are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from .tasks import FORCED, FREE, FULL, REWARD_VALUES, TaskEnv, TaskSpec, TrialRecord, Transcript

CHOSEN, UNCHOSEN = "chosen", "unchosen"
POSITIVE, NEGATIVE = "positive", "negative"


@dataclass(frozen=True)
class UpdateContext:
    target: str
    trial_kind: str
    error_sign: str

    @property
    def index(self) -> int:
        return (4 * (self.target == UNCHOSEN) + 2 * (self.trial_kind == FORCED)
                + (self.error_sign == NEGATIVE))


ALL_CONTEXTS = tuple(
    UpdateContext(t, k, s) for t, k, s in product((CHOSEN, UNCHOSEN), (FREE, FORCED), (POSITIVE, NEGATIVE))
)


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    rate_names: tuple[str, ...]
    rate_table: tuple[int, ...]

    @property
    def n_rates(self) -> int:
        return len(self.rate_names)

    @property
    def n_params(self) -> int:
        return self.n_rates + 1

    def slot(self, context: UpdateContext) -> Optional[int]:
        s = self.rate_table[context.index]
        return None if s < 0 else s


def _table(rule) -> tuple[int, ...]:
    table = []
    for ctx in ALL_CONTEXTS:
        s = rule(ctx)
        table.append(-1 if s is None else s)
    return tuple(table)


def _sign_slot(ctx: UpdateContext) -> int:
    return 0 if ctx.error_sign == POSITIVE else 1


MODELS: dict[str, ModelSpec] = {
    "RW": ModelSpec("RW", ("alpha",), _table(lambda c: 0 if c.target == CHOSEN else None)),
    "RWpm": ModelSpec(
        "RWpm", ("alpha_pos", "alpha_neg"),
        _table(lambda c: _sign_slot(c) if c.target == CHOSEN else None),
    ),
    "Full4a": ModelSpec(
        "Full4a",
        ("alpha_chosen_pos", "alpha_chosen_neg", "alpha_unchosen_pos", "alpha_unchosen_neg"),
        _table(lambda c: _sign_slot(c) + (2 if c.target == UNCHOSEN else 0)),
    ),
    "Confirm2a": ModelSpec(
        "Confirm2a", ("alpha_confirm", "alpha_disconfirm"),
        # chosen+ and unchosen- confirm the choice
        _table(lambda c: 0 if (c.target == CHOSEN) == (c.error_sign == POSITIVE) else 1),
    ),
    "Agency3a": ModelSpec(
        "Agency3a", ("alpha_free_pos", "alpha_free_neg", "alpha_forced"),
        _table(lambda c: None if c.target == UNCHOSEN else (2 if c.trial_kind == FORCED else _sign_slot(c))),
    ),
    "Agency4a": ModelSpec(
        "Agency4a", ("alpha_free_pos", "alpha_free_neg", "alpha_forced_pos", "alpha_forced_neg"),
        _table(lambda c: None if c.target == UNCHOSEN
               else _sign_slot(c) + (2 if c.trial_kind == FORCED else 0)),
    ),
}


def get_model(model_id: str) -> ModelSpec:
    try:
        return MODELS[model_id]
    except KeyError:
        raise ValueError(f"unknown model_id {model_id!r}; choose from {sorted(MODELS)}") from None


@dataclass(frozen=True)
class ParamVector:
    rates: tuple[float, ...]
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if not all(0.0 <= r <= 1.0 for r in self.rates):
            raise ValueError(f"learning rates must lie in [0, 1], got {self.rates}")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"beta must be finite and nonnegative, got {self.beta}")

    def check(self, model: ModelSpec) -> None:
        if len(self.rates) != model.n_rates:
            raise ValueError(f"{model.model_id} needs {model.n_rates} rates, got {len(self.rates)}")


@dataclass(frozen=True)
class ValueState:
    """Expected values per block; unseen blocks start at ``v0``."""

    values: Mapping[int, tuple[float, float]]
    v0: float

    def get(self, block_id: int) -> tuple[float, float]:
        return self.values.get(block_id, (self.v0, self.v0))


def initial_value(reward_values: Sequence[float]) -> float:
    return float(np.mean(reward_values))


def prediction_error(value: float, reward: float) -> float:
    return reward - value


def apply_update(state: ValueState, model: ModelSpec, params: ParamVector,
                 record: TrialRecord) -> ValueState:
    if (record.reward_unchosen is not None) != (record.feedback_mode == FULL):
        raise ValueError("record reward_unchosen does not match its feedback mode")
    c = record.chosen_index
    v = list(state.get(record.block_id))
    observed = [(c, CHOSEN, record.reward_chosen)]
    if record.reward_unchosen is not None:
        observed.append((1 - c, UNCHOSEN, record.reward_unchosen))
    for option, target, reward in observed:
        delta = prediction_error(v[option], reward)
        if delta == 0:
            continue
        ctx = UpdateContext(target, record.kind, POSITIVE if delta > 0 else NEGATIVE)
        slot = model.slot(ctx)
        if slot is not None:
            v[option] = v[option] + params.rates[slot] * delta
    values = dict(state.values)
    values[record.block_id] = (v[0], v[1])
    return ValueState(values, state.v0)


def choice_probabilities(values: Sequence[float], beta: float) -> np.ndarray:
    z = beta * np.asarray(values, dtype=float)
    z = np.exp(z - z.max())
    return z / z.sum()


def simulate_agent(task: TaskSpec, model: ModelSpec, params: ParamVector,
                   rng: np.random.Generator, run_id: int = 0,
                   seed: Optional[int] = None) -> Transcript:
    """Run a model agent through ``task``.

    Each block keeps its own values, starting from the mean reward value.
    """
    params.check(model)
    env = TaskEnv(task, rng, run_id=run_id)
    state = ValueState({}, initial_value(task.reward_values))
    while not env.done:
        block, _ = env.current
        forced = env.current_forced
        if forced is None:
            p = choice_probabilities(state.get(block.block_id), params.beta)
            action = int(rng.random() >= p[0])
        else:
            action = forced
        rec = env.step(action)
        state = apply_update(state, model, params, rec)
    return Transcript(task.task_id, "cogsim", seed, env.records, run_id=run_id, task=task)


# -- compiled likelihood ----------------------------------------------------


@dataclass(frozen=True)
class TrialArrays:
    """Transcript flattened to arrays for the likelihood kernel."""

    block: np.ndarray
    chosen: np.ndarray
    forced: np.ndarray
    reward_chosen: np.ndarray
    reward_unchosen: np.ndarray
    n_blocks: int
    v0: float

    @property
    def n_choices(self) -> int:
        return int(np.sum(self.forced == 0))


def transcript_arrays(transcript: Transcript) -> TrialArrays:
    reward_values = transcript.task.reward_values if transcript.task else REWARD_VALUES[transcript.task_id]
    block_index: dict[int, int] = {}
    n = len(transcript.records)
    block = np.empty(n, dtype=np.int64)
    chosen = np.empty(n, dtype=np.int64)
    forced = np.empty(n, dtype=np.int64)
    r_c = np.empty(n)
    r_u = np.full(n, np.nan)
    for i, rec in enumerate(transcript.records):
        if rec.chosen not in rec.options:
            raise ValueError(f"malformed record {i}: chosen not among options")
        if (rec.reward_unchosen is not None) != (rec.feedback_mode == FULL):
            raise ValueError(f"malformed record {i}: reward_unchosen inconsistent with feedback mode")
        block[i] = block_index.setdefault(rec.block_id, len(block_index))
        chosen[i] = rec.chosen_index
        forced[i] = rec.kind == FORCED
        r_c[i] = rec.reward_chosen
        if rec.reward_unchosen is not None:
            r_u[i] = rec.reward_unchosen
    return TrialArrays(block, chosen, forced, r_c, r_u, len(block_index), initial_value(reward_values))


@njit(cache=True)
def _nll_kernel(block, chosen, forced, r_c, r_u, table, rates, beta, v0, n_blocks):
    V = np.full((n_blocks, 2), v0)
    nll = 0.0
    for t in range(block.shape[0]):
        b = block[t]
        c = chosen[t]
        k = forced[t]
        if k == 0:
            zc = beta * V[b, c]
            zo = beta * V[b, 1 - c]
            m = max(zc, zo)
            nll -= zc - m - math.log(math.exp(zc - m) + math.exp(zo - m))
        d = r_c[t] - V[b, c]
        if d != 0.0:
            s = table[2 * k + (1 if d < 0.0 else 0)]
            if s >= 0:
                V[b, c] += rates[s] * d
        ru = r_u[t]
        if not math.isnan(ru):
            o = 1 - c
            d = ru - V[b, o]
            if d != 0.0:
                s = table[4 + 2 * k + (1 if d < 0.0 else 0)]
                if s >= 0:
                    V[b, o] += rates[s] * d
    return nll


def nll_arrays(data: TrialArrays, model: ModelSpec, rates: np.ndarray, beta: float) -> float:
    return _nll_kernel(data.block, data.chosen, data.forced, data.reward_chosen,
                       data.reward_unchosen, np.asarray(model.rate_table, dtype=np.int64),
                       np.asarray(rates, dtype=float), float(beta), data.v0, data.n_blocks)


def negative_log_likelihood(transcript: Transcript, model: ModelSpec, params: ParamVector) -> float:
    """Negative log-probability of the free choices; forced trials only update values."""
    params.check(model)
    if not transcript.records:
        return 0.0
    return nll_arrays(transcript_arrays(transcript), model, np.array(params.rates), params.beta)
