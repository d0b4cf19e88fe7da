import csv
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pytest

from asymbelief.tasks import TaskEnv, Transcript, build_task


def random_transcript(task_id: int, seed: int, n_records=None, run_id: int = 0) -> Transcript:
    """Uniform-random play of a freshly built task, optionally truncated."""
    task = build_task(task_id, seed)
    rng = np.random.default_rng(seed + 7919)
    env = TaskEnv(task, rng, run_id=run_id)
    limit = len(task.schedule) if n_records is None else n_records
    while not env.done and len(env.records) < limit:
        forced = env.current_forced
        env.step(forced if forced is not None else int(rng.random() < 0.5))
    return Transcript(task_id, "cogsim", seed, env.records, run_id=run_id, task=task,
                      complete=env.done)


def with_run_id(tr: Transcript, run_id: int) -> Transcript:
    return replace(tr, run_id=run_id, records=[replace(r, run_id=run_id) for r in tr.records])


@pytest.fixture
def task1_transcript():
    return random_transcript(1, 0)


@pytest.fixture(scope="session")
def trained_agent(request):
    """Return ``get(task_id, seed) -> (checkpoint, mean reward per episode)`` for the default agent.

    Training runs once per (config, seed); checkpoint and log are cached under
    the pytest cache directory, or ``$ASYMBELIEF_CHECKPOINTS`` when set.
    """
    from asymbelief.metarl import AgentCheckpoint, AgentConfig, train

    env = os.environ.get("ASYMBELIEF_CHECKPOINTS")
    root = Path(env) if env else Path(request.config.cache.mkdir("metarl_checkpoints"))
    root.mkdir(parents=True, exist_ok=True)

    def get(task_id, seed=0):
        cfg = AgentConfig.for_task(task_id)
        key = hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:12]
        stem = root / f"task{task_id}_seed{seed}_{key}"
        ckpt_path, log_path = stem.with_suffix(".npz"), stem.with_suffix(".csv")
        if not (ckpt_path.exists() and log_path.exists()):
            logging.getLogger(__name__).warning("training task %d agent, seed %d; caching at %s",
                                                task_id, seed, stem)
            train(cfg, seed, log_path=log_path).save(ckpt_path)
        with open(log_path) as fh:
            rewards = np.array([float(row["mean_reward"]) for row in csv.DictReader(fh)])
        return AgentCheckpoint.load(ckpt_path), rewards

    return get


def pytest_configure(config):
    config._criterion_lines = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    item.config._criterion_lines[marker.args[0]] = f"criterion {marker.args[0]:>2}: {status}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criterion_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        # criterion ids are numbers or number-plus-letter ("6a")
        for key in sorted(lines, key=lambda k: (int(re.match(r"\d+", str(k))[0]), str(k))):
            terminalreporter.write_line(lines[key])
