"""Prompt rendering, completion parsing and a chat-completion session driver."""

from __future__ import annotations

import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np

from .tasks import FORCED, FULL, TaskEnv, TaskSpec, TrialRecord, Transcript, load_transcripts

log = logging.getLogger(__name__)

ELIGIBLE_LABELS = tuple(c for c in string.ascii_uppercase if c not in "UI")

TASK1_INTRO = (
    "You are going to visit four different casinos (named 1, 2, 3, and 4) 24 times each. "
    "Each casino owns two slot machines which all return either 0.5 or 0 dollars stochastically "
    "with different reward probabilities. Your goal is to maximize the sum of received dollars "
    "within 96 visits."
)
TASK1_HEADING = "You have received the following amount of dollars when playing in the past:"
BLOCK_HEADING = "During your previous visits you have observed the following:"
CASINO_PREAMBLE = (
    "You will visit a casino {n} times. The casino has two slot machines that stochastically "
    "return either 1 or -1 with different reward probabilities. You can only interact with one "
    "slot machine per visit."
)
TASK2_PARTIAL_BODY = (
    " Half of the time you visit the casino, you can play, the other someone else is playing. "
    "During visits where you can play, you'll earn points from the chosen machine. "
    "During visits where someone else is playing, you'll learn what points are earned on the "
    "chosen machine."
)
# the comma after "you" is part of the original prompt text
TASK2_FULL_BODY = (
    " Half of the time you visit the casino, you can play, the other someone else is playing. "
    "During visits where you, can play, you'll earn points from the chosen machine. "
    "You'll also learn what points would have been earned had the other machine been selected. "
    "During visits where someone else is playing, you'll learn what points are earned on the "
    "chosen and what points would have been earned had the other machine been selected. "
    "Nevertheless, you only accumulate points from the machine you choose to play."
)
TASK3_MIXED_BODY = (
    " Half of the time you visit the casino, you can play, the other half someone else is "
    "playing and you can only see the rewards for their chosen slot machine."
)
GOAL = " Your goal is to maximize the total amount of points you receive in all {n} visits you can play."
ANSWER_STUB = "A: Machine"


class NoValidChoice(ValueError):
    pass


class EndpointError(RuntimeError):
    pass


class SessionAborted(RuntimeError):
    """A session stopped early; ``transcript`` holds the partial run (complete=False)."""

    def __init__(self, message: str, transcript: Transcript):
        super().__init__(message)
        self.transcript = transcript


@dataclass
class PromptState:
    """Everything needed to render the prompt for the next free choice.

    ``history`` holds the records shown to the model, oldest first; for
    Tasks 2-3 only the current block's records. ``question`` is the label
    pair in the order it is asked.
    """

    task_id: int
    history: list[TrialRecord]
    visit: int
    question: tuple[str, str]
    casino: Optional[int] = None
    feedback_mode: str = "partial"
    mixed: bool = False
    n_visits: int = 40
    n_playable: int = 40


def _reward(r: float) -> str:
    return f"{r:.1f}"


def history_lines(state: PromptState) -> list[str]:
    lines = []
    for rec in state.history:
        other = rec.options[1 - rec.chosen_index]
        forced = rec.kind == FORCED
        if state.task_id == 1:
            lines.append(f"- Machine {rec.chosen} in Casino {rec.block_id + 1} "
                         f"delivered {_reward(rec.reward_chosen)} dollars.")
            continue
        who = "someone else" if forced else "you"
        verb = "received" if forced and state.task_id == 3 else "earned"
        lines.append(f"- On visit {rec.global_visit} {who} played Machine {rec.chosen} "
                     f"and {verb} {_reward(rec.reward_chosen)} point.")
        if rec.reward_unchosen is not None:
            subject = "the player" if forced else "you"
            lines.append(f"  On Machine {other} {subject} would have earned "
                         f"{_reward(rec.reward_unchosen)} point.")
    return lines


def render_prompt(state: PromptState) -> str:
    a, b = state.question
    if state.task_id == 1:
        intro, heading = TASK1_INTRO, TASK1_HEADING
        question = (f"Q: You are now in visit {state.visit} playing in Casino {state.casino}. "
                    f"Which machine do you choose between Machine {a} and Machine {b}?")
        before_q, before_a = "\n\n", "\n\n"
    elif state.task_id in (2, 3):
        intro = CASINO_PREAMBLE.format(n=state.n_visits)
        if state.task_id == 2:
            intro += TASK2_FULL_BODY if state.feedback_mode == FULL else TASK2_PARTIAL_BODY
        elif state.mixed:
            intro += TASK3_MIXED_BODY
        intro += GOAL.format(n=state.n_playable)
        heading = BLOCK_HEADING
        question = (f"Q: You are now in visit {state.visit}. "
                    f"Which machine do you choose between Machine {a} and Machine {b}?")
        # the partial-feedback Task 2 prompt has no spacer before the question
        before_q = "\n" if (state.task_id == 2 and state.feedback_mode != FULL) else "\n\n"
        before_a = "\n"
    else:
        raise ValueError(f"unknown task_id {state.task_id!r}")
    lines = history_lines(state)
    body = heading + "\n\n"
    if lines:
        body += "\n".join(lines) + before_q
    return intro + "\n\n" + body + question + before_a + ANSWER_STUB


_T1_LINE = re.compile(r"^- Machine ([A-Z]) in Casino (\d+) delivered (-?\d+\.\d) dollars\.$")
_BLOCK_LINE = re.compile(
    r"^- On visit (\d+) (you|someone else) played Machine ([A-Z]) and (?:earned|received) (-?\d+\.\d) point\.$")
_CF_LINE = re.compile(r"^  On Machine ([A-Z]) (?:you|the player) would have earned (-?\d+\.\d) point\.$")


def parse_history(prompt: str) -> list[dict]:
    """Recover the feedback entries listed in a rendered prompt."""
    entries: list[dict] = []
    for line in prompt.splitlines():
        if m := _T1_LINE.match(line):
            entries.append({"chosen": m[1], "casino": int(m[2]), "reward_chosen": float(m[3]),
                            "kind": "free", "unchosen_label": None, "reward_unchosen": None})
        elif m := _BLOCK_LINE.match(line):
            entries.append({"visit": int(m[1]), "kind": "free" if m[2] == "you" else FORCED,
                            "chosen": m[3], "reward_chosen": float(m[4]),
                            "unchosen_label": None, "reward_unchosen": None})
        elif m := _CF_LINE.match(line):
            entries[-1]["unchosen_label"] = m[1]
            entries[-1]["reward_unchosen"] = float(m[2])
    return entries


def replay_prompts(transcript: Transcript, rng: np.random.Generator) -> list[str]:
    """Prompts a language model would have seen at each free trial of ``transcript``.

    The order of the two labels in each question is drawn from ``rng``.
    """
    blocks = transcript.blocks()
    sizes = {bid: (len(recs), sum(r.kind != FORCED for r in recs)) for bid, recs in blocks.items()}
    prompts = []
    history: list[TrialRecord] = []
    current = None
    for rec in transcript.records:
        if transcript.task_id != 1 and rec.block_id != current:
            history, current = [], rec.block_id
        if rec.kind != FORCED:
            order = rng.permutation(2)
            n_visits, n_free = sizes[rec.block_id]
            state = PromptState(
                task_id=transcript.task_id, history=list(history), visit=rec.global_visit,
                question=(rec.options[order[0]], rec.options[order[1]]),
                casino=rec.block_id + 1 if transcript.task_id == 1 else None,
                feedback_mode=rec.feedback_mode, mixed=n_free < n_visits,
                n_visits=n_visits, n_playable=n_free,
            )
            prompts.append(render_prompt(state))
        history.append(rec)
    return prompts


def assign_labels(rng: np.random.Generator, n_machines: int) -> list[str]:
    """Distinct random machine letters, never U or I."""
    if n_machines > len(ELIGIBLE_LABELS):
        raise ValueError(f"at most {len(ELIGIBLE_LABELS)} machines can be labelled")
    idx = rng.choice(len(ELIGIBLE_LABELS), size=n_machines, replace=False)
    return [ELIGIBLE_LABELS[i] for i in idx]


_LETTER = re.compile(r"(?<![A-Za-z])([A-Za-z])(?![A-Za-z])")


def parse_choice(completion: str, valid_labels: Sequence[str]) -> str:
    valid = {l.upper() for l in valid_labels}
    for m in _LETTER.finditer(completion):
        letter = m[1].upper()
        if letter in valid:
            return letter
    raise NoValidChoice(f"no choice among {sorted(valid)} in {completion!r}")


# -- endpoint ---------------------------------------------------------------


class CompletionClient(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "LLM_API_KEY"
    temperature: float = 0.0
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 1.0
    max_concurrency: int = 1
    max_tokens: int = 4


class ChatClient:
    """Single-turn chat-completion client shared by concurrent sessions.

    Requests are POSTed to ``{base_url}/chat/completions`` with an
    OpenAI-style body; at most ``max_concurrency`` are in flight at once.
    """

    def __init__(self, config: EndpointConfig, transport: Optional[httpx.BaseTransport] = None):
        self.config = config
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(base_url=config.base_url, headers=headers,
                                  timeout=config.timeout, transport=transport)
        self._slots = threading.Semaphore(config.max_concurrency)

    def _request(self, prompt: str) -> str:
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        }
        resp = self._http.post("/chat/completions", json=body)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def complete(self, prompt: str) -> str:
        last: Exception | None = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                time.sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    return self._request(prompt)
            except httpx.HTTPStatusError as exc:
                if exc.response.status_code < 500 and exc.response.status_code != 429:
                    raise EndpointError(str(exc)) from exc
                last = exc
            except httpx.TransportError as exc:
                last = exc
            log.warning("endpoint request failed (attempt %d): %s", attempt + 1, last)
        raise EndpointError(f"giving up after {self.config.retries + 1} attempts: {last}")

    def close(self) -> None:
        self._http.close()


def _session_labels(task: TaskSpec, rng: np.random.Generator) -> dict[int, tuple[str, str]]:
    if task.task_id == 1:
        letters = assign_labels(rng, 2 * len(task.blocks))
        return {b.block_id: (letters[2 * i], letters[2 * i + 1]) for i, b in enumerate(task.blocks)}
    return {b.block_id: tuple(assign_labels(rng, 2)) for b in task.blocks}


def run_session(task: TaskSpec, client: CompletionClient, rng: np.random.Generator,
                run_id: int = 0, seed: Optional[int] = None, choice_retries: int = 1) -> Transcript:
    """Play ``task`` by querying ``client`` on every free trial.

    Each query is a fresh standalone prompt holding the full history. On
    failure raises :class:`SessionAborted` carrying the partial transcript.
    """
    labels = _session_labels(task, rng)
    env = TaskEnv(task, rng, run_id=run_id, labels=labels)
    transcript = Transcript(task.task_id, "llm", seed, env.records, run_id=run_id, task=task)
    history: list[TrialRecord] = []
    current_block = None
    while not env.done:
        block, _ = env.current
        if task.task_id != 1 and block.block_id != current_block:
            history = []
            current_block = block.block_id
        forced = env.current_forced
        if forced is not None:
            action = forced
        else:
            pair = labels[block.block_id]
            order = rng.permutation(2)
            state = PromptState(
                task_id=task.task_id, history=history, visit=env.global_visit,
                question=(pair[order[0]], pair[order[1]]),
                casino=block.block_id + 1 if task.task_id == 1 else None,
                feedback_mode=block.feedback_mode, mixed=block.is_mixed,
                n_visits=block.n_trials, n_playable=block.n_free,
            )
            prompt = render_prompt(state)
            choice = None
            for attempt in range(choice_retries + 1):
                try:
                    completion = client.complete(prompt)
                except EndpointError as exc:
                    transcript.complete = False
                    raise SessionAborted(f"run {run_id}: {exc}", transcript) from exc
                try:
                    choice = parse_choice(completion, pair)
                    break
                except NoValidChoice as exc:
                    log.warning("run %d visit %d: %s", run_id, env.global_visit, exc)
            if choice is None:
                transcript.complete = False
                raise SessionAborted(f"run {run_id}: no valid choice at visit {env.global_visit}", transcript)
            action = pair.index(choice)
        history = history + [env.step(action)]
    return transcript


def ingest(path) -> list[Transcript]:
    """Load and validate an externally produced transcript file."""
    return load_transcripts(path)
