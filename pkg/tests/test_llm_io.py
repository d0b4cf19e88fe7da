import json
import re
import string
from collections import Counter

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from asymbelief.cogmodel import get_model
from asymbelief.fitting import map_fit
from asymbelief.llm_io import (ELIGIBLE_LABELS, ChatClient, EndpointConfig, NoValidChoice, PromptState,
                               SessionAborted, assign_labels, parse_choice, parse_history, render_prompt,
                               replay_prompts, run_session)
from asymbelief.tasks import FORCED, FREE, FULL, PARTIAL, TrialRecord, build_task, expected_regret

from conftest import random_transcript


def rec(visit, chosen, reward, kind=FREE, options=("H", "E"), unchosen=None, block_id=0):
    mode = FULL if unchosen is not None else PARTIAL
    return TrialRecord(0, block_id, visit - 1, visit, kind, options, chosen, reward, unchosen, mode)


TASK1_GOLDEN = (
    "You are going to visit four different casinos (named 1, 2, 3, and 4) 24 times each. Each casino owns "
    "two slot machines which all return either 0.5 or 0 dollars stochastically with different reward "
    "probabilities. Your goal is to maximize the sum of received dollars within 96 visits.\n\n"
    "You have received the following amount of dollars when playing in the past:\n\n"
    "- Machine B in Casino 4 delivered 0.5 dollars.\n"
    "- Machine F in Casino 1 delivered 0.0 dollars.\n"
    "- Machine B in Casino 4 delivered 0.5 dollars.\n\n"
    "Q: You are now in visit 4 playing in Casino 4. Which machine do you choose between Machine R and "
    "Machine B?\n\n"
    "A: Machine"
)

TASK2_PARTIAL_GOLDEN = (
    "You will visit a casino 40 times. The casino has two slot machines that stochastically return either 1 "
    "or -1 with different reward probabilities. You can only interact with one slot machine per visit. Half "
    "of the time you visit the casino, you can play, the other someone else is playing. During visits where "
    "you can play, you'll earn points from the chosen machine. During visits where someone else is playing, "
    "you'll learn what points are earned on the chosen machine. Your goal is to maximize the total amount of "
    "points you receive in all 20 visits you can play.\n\n"
    "During your previous visits you have observed the following:\n\n"
    "- On visit 1 someone else played Machine H and earned 1.0 point.\n"
    "- On visit 2 you played Machine H and earned 1.0 point.\n"
    "- On visit 3 you played Machine E and earned -1.0 point.\n"
    "Q: You are now in visit 4. Which machine do you choose between Machine E and Machine H?\n"
    "A: Machine"
)

TASK2_FULL_GOLDEN = (
    "You will visit a casino 40 times. The casino has two slot machines that stochastically return either 1 "
    "or -1 with different reward probabilities. You can only interact with one slot machine per visit. Half "
    "of the time you visit the casino, you can play, the other someone else is playing. During visits where "
    "you, can play, you'll earn points from the chosen machine. You'll also learn what points would have "
    "been earned had the other machine been selected. During visits where someone else is playing, you'll "
    "learn what points are earned on the chosen and what points would have been earned had the other "
    "machine been selected. Nevertheless, you only accumulate points from the machine you choose to play. "
    "Your goal is to maximize the total amount of points you receive in all 20 visits you can play.\n\n"
    "During your previous visits you have observed the following:\n\n"
    "- On visit 1 someone else played Machine H and earned 1.0 point.\n"
    "  On Machine E the player would have earned -1.0 point.\n"
    "- On visit 2 you played Machine H and earned 1.0 point.\n"
    "  On Machine E you would have earned -1.0 point.\n"
    "- On visit 3 you played Machine E and earned -1.0 point.\n"
    "  On Machine H you would have earned 1.0 point.\n\n"
    "Q: You are now in visit 4. Which machine do you choose between Machine E and Machine H?\n"
    "A: Machine"
)

TASK3_FREE_GOLDEN = (
    "You will visit a casino 40 times. The casino has two slot machines that stochastically return either 1 "
    "or -1 with different reward probabilities. You can only interact with one slot machine per visit. Your "
    "goal is to maximize the total amount of points you receive in all 40 visits you can play.\n\n"
    "During your previous visits you have observed the following:\n\n"
    "- On visit 1 you played Machine H and earned 1.0 point.\n"
    "- On visit 2 you played Machine N and earned -1.0 point.\n"
    "- On visit 3 you played Machine H and earned -1.0 point.\n\n"
    "Q: You are now in visit 4. Which machine do you choose between Machine N and Machine H?\n"
    "A: Machine"
)

TASK3_MIXED_GOLDEN = (
    "You will visit a casino 80 times. The casino has two slot machines that stochastically return either 1 "
    "or -1 with different reward probabilities. You can only interact with one slot machine per visit. Half "
    "of the time you visit the casino, you can play, the other half someone else is playing and you can "
    "only see the rewards for their chosen slot machine. Your goal is to maximize the total amount of points "
    "you receive in all 40 visits you can play.\n\n"
    "During your previous visits you have observed the following:\n\n"
    "- On visit 1 you played Machine H and earned 1.0 point.\n"
    "- On visit 2 someone else played Machine N and received -1.0 point.\n"
    "- On visit 3 you played Machine H and earned -1.0 point.\n\n"
    "Q: You are now in visit 4. Which machine do you choose between Machine N and Machine H?\n"
    "A: Machine"
)


def golden_states():
    t1 = [rec(1, "B", 0.5, options=("R", "B"), block_id=3), rec(2, "F", 0.0, options=("F", "K"), block_id=0),
          rec(3, "B", 0.5, options=("R", "B"), block_id=3)]
    t2p = [rec(1, "H", 1.0, kind=FORCED), rec(2, "H", 1.0), rec(3, "E", -1.0)]
    t2f = [rec(1, "H", 1.0, kind=FORCED, unchosen=-1.0), rec(2, "H", 1.0, unchosen=-1.0),
           rec(3, "E", -1.0, unchosen=1.0)]
    nh = ("H", "N")
    t3f = [rec(1, "H", 1.0, options=nh), rec(2, "N", -1.0, options=nh), rec(3, "H", -1.0, options=nh)]
    t3m = [rec(1, "H", 1.0, options=nh), rec(2, "N", -1.0, kind=FORCED, options=nh), rec(3, "H", -1.0, options=nh)]
    return {
        "task1": (PromptState(1, t1, 4, ("R", "B"), casino=4), TASK1_GOLDEN),
        "task2_partial": (PromptState(2, t2p, 4, ("E", "H"), n_visits=40, n_playable=20), TASK2_PARTIAL_GOLDEN),
        "task2_full": (PromptState(2, t2f, 4, ("E", "H"), feedback_mode=FULL, n_visits=40, n_playable=20),
                       TASK2_FULL_GOLDEN),
        "task3_free": (PromptState(3, t3f, 4, ("N", "H"), n_visits=40, n_playable=40), TASK3_FREE_GOLDEN),
        "task3_mixed": (PromptState(3, t3m, 4, ("N", "H"), mixed=True, n_visits=80, n_playable=40),
                        TASK3_MIXED_GOLDEN),
    }


class TestRender:
    @pytest.mark.parametrize("name", sorted(golden_states()))
    def test_golden(self, name):
        state, expected = golden_states()[name]
        assert render_prompt(state) == expected

    def test_counterfactual_line_for_forced_trial(self):
        state, _ = golden_states()["task2_full"]
        assert "On Machine E the player would have earned -1.0 point." in render_prompt(state).splitlines()[5]

    def test_empty_history(self):
        text = render_prompt(PromptState(1, [], 1, ("Q", "Z"), casino=2))
        assert "You have received the following amount of dollars when playing in the past:\n\n" in text
        assert "- Machine" not in text
        assert "Q: You are now in visit 1 playing in Casino 2." in text
        text = render_prompt(PromptState(3, [], 1, ("Q", "Z")))
        assert text.endswith("observed the following:\n\nQ: You are now in visit 1. "
                             "Which machine do you choose between Machine Q and Machine Z?\nA: Machine")

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            render_prompt(PromptState(4, [], 1, ("A", "B")))


class TestLabels:
    def test_no_u_or_i(self):
        assert len(ELIGIBLE_LABELS) == 24 and not {"U", "I"} & set(ELIGIBLE_LABELS)
        for seed in range(50):
            labels = assign_labels(np.random.default_rng(seed), 24)
            assert sorted(labels) == sorted(ELIGIBLE_LABELS)

    def test_pair_distinct(self):
        a, b = assign_labels(np.random.default_rng(1), 2)
        assert a != b

    def test_too_many(self):
        with pytest.raises(ValueError):
            assign_labels(np.random.default_rng(0), 25)

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(0)
        counts = Counter(assign_labels(rng, 1)[0] for _ in range(10_000))
        assert set(counts) == set(ELIGIBLE_LABELS)
        assert all(abs(c / 10_000 - 1 / 24) < 0.01 for c in counts.values())


class TestParseChoice:
    def test_examples(self):
        assert parse_choice(" B", ["R", "B"]) == "B"
        assert parse_choice("R. Because it paid more", ["R", "B"]) == "R"
        assert parse_choice("b", ["R", "B"]) == "B"
        with pytest.raises(NoValidChoice):
            parse_choice("machine Z", ["R", "B"])

    def test_ignores_letters_inside_words(self):
        assert parse_choice("Both are fine, B", ["R", "B"]) == "B"

    @given(st.text(alphabet=string.ascii_letters + " .,!?\n", max_size=40),
           st.lists(st.sampled_from(ELIGIBLE_LABELS), min_size=2, max_size=2, unique=True))
    def test_never_outside_pair(self, completion, pair):
        try:
            assert parse_choice(completion, pair) in pair
        except NoValidChoice:
            pass


class TestRoundTrip:
    @pytest.mark.parametrize("task_id", [1, 2, 3])
    def test_history_reconstructs_records(self, task_id):
        tr = random_transcript(task_id, 4)
        prompts = replay_prompts(tr, np.random.default_rng(0))
        assert len(prompts) == tr.n_free
        free_positions = [i for i, r in enumerate(tr.records) if r.kind == FREE]
        for pos, prompt in zip(free_positions, prompts):
            current = tr.records[pos]
            shown = [r for r in tr.records[:pos] if task_id == 1 or r.block_id == current.block_id]
            entries = parse_history(prompt)
            assert len(entries) == len(shown)
            for e, r in zip(entries, shown):
                assert e["chosen"] == r.chosen and e["reward_chosen"] == r.reward_chosen
                assert e["kind"] == r.kind
                assert e["reward_unchosen"] == r.reward_unchosen
                if r.reward_unchosen is not None:
                    assert e["unchosen_label"] == r.options[1 - r.chosen_index]
                if task_id == 1:
                    assert e["casino"] == r.block_id + 1
                else:
                    assert e["visit"] == r.global_visit
            q = re.search(r"between Machine (\w) and Machine (\w)\?", prompt)
            assert set(q.groups()) == set(current.options)


# -- scripted endpoints ------------------------------------------------------


class FirstLabelClient:
    def complete(self, prompt):
        return " " + re.search(r"between Machine (\w) and", prompt)[1]


class GreedyHistoryClient:
    """Answers the label with the highest mean reward in the prompt's history (unseen labels first)."""

    def complete(self, prompt):
        a, b = re.search(r"between Machine (\w) and Machine (\w)\?", prompt).groups()
        casino = re.search(r"playing in Casino (\d)", prompt)
        means = {}
        for label in (a, b):
            rs = [e["reward_chosen"] for e in parse_history(prompt)
                  if e["chosen"] == label and (casino is None or e["casino"] == int(casino[1]))]
            means[label] = np.mean(rs) if rs else np.inf
        return max((a, b), key=lambda l: means[l])


def mock_client(handler, **kw):
    cfg = EndpointConfig(base_url="http://mock.local/v1", model="mock", backoff=0.0, **kw)
    return ChatClient(cfg, transport=httpx.MockTransport(handler))


class TestSession:
    def test_first_label_agent(self):
        task = build_task(2, 0)
        rng = np.random.default_rng(0)
        client = FirstLabelClient()
        prompts = []

        class Spy:
            def complete(self, prompt):
                prompts.append(prompt)
                return client.complete(prompt)

        tr = run_session(task, Spy(), rng, run_id=3, seed=0)
        assert tr.complete and tr.agent_tag == "llm" and len(tr.records) == 640
        asked = [re.search(r"between Machine (\w) and", p)[1] for p in prompts]
        assert asked == [r.chosen for r in tr.records if r.kind == FREE]
        assert all(r.run_id == 3 for r in tr.records)

    def test_labels_per_block(self):
        tr = run_session(build_task(1, 2), FirstLabelClient(), np.random.default_rng(2))
        pairs = {r.block_id: r.options for r in tr.records}
        letters = [l for p in pairs.values() for l in p]
        assert len(pairs) == 4 and len(set(letters)) == 8 and not {"U", "I"} & set(letters)

    def test_scripted_learner_reduces_regret(self):
        early, late = [], []
        for seed in range(20):
            task = build_task(1, seed)
            tr = run_session(task, GreedyHistoryClient(), np.random.default_rng(seed), seed=seed)
            for r in tr.records:
                reg = expected_regret(task.block(r.block_id), r.chosen_index, task.reward_values)
                (early if r.trial_index < 3 else late if r.trial_index >= 19 else []).append(reg)
        assert np.mean(late) < np.mean(early)

    def test_http_session_yields_fittable_transcript(self):
        seen = []

        def handler(request):
            body = request.read().decode()
            seen.append(body)
            prompt = json.loads(body)["messages"][0]["content"]
            return httpx.Response(200, json={"choices": [{"message": {"content": GreedyHistoryClient().complete(prompt)}}]})

        client = mock_client(handler)
        tr = run_session(build_task(1, 5), client, np.random.default_rng(5), seed=5)
        client.close()
        assert tr.complete and len(tr.records) == 96 and len(seen) == 96
        fit = map_fit(tr, get_model("RWpm"))
        assert np.isfinite(fit.log_likelihood)

    def test_timeout_aborts_with_partial_transcript(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] > 5:
                raise httpx.ReadTimeout("timed out", request=request)
            return httpx.Response(200, json={"choices": [{"message": {"content": "A"}}]})

        client = mock_client(handler, retries=2)
        task = build_task(3, 1)
        # labels are random; answer with whichever letter is first in the question
        with pytest.raises(SessionAborted) as info:
            run_session(task, _FirstLabelOver(client), np.random.default_rng(1))
        partial = info.value.transcript
        assert partial.complete is False
        assert sum(r.kind == FREE for r in partial.records) == 5
        assert calls["n"] == 5 + 3

    def test_invalid_answers_abort(self):
        class Mumbler:
            def complete(self, prompt):
                return "no idea"

        with pytest.raises(SessionAborted) as info:
            run_session(build_task(1, 0), Mumbler(), np.random.default_rng(0))
        assert info.value.transcript.records == [] and not info.value.transcript.complete

    def test_client_error_not_retried(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(401, json={"error": "bad key"})

        client = mock_client(handler, retries=3)
        with pytest.raises(SessionAborted):
            run_session(build_task(1, 0), client, np.random.default_rng(0))
        assert calls["n"] == 1


class _FirstLabelOver:
    """Routes prompts through a real client but rewrites its answer to the first offered label."""

    def __init__(self, client):
        self.client = client

    def complete(self, prompt):
        self.client.complete(prompt)
        return FirstLabelClient().complete(prompt)
