"""Declarative experiment configuration (YAML)."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .cogmodel import MODELS, ParamVector, get_model
from .fitting import FitConfig, PriorSpec
from .metarl.network import AgentConfig

AGENTS = ("cogsim", "metarl", "llm-endpoint", "ingest")

DEFAULT_MODELS = {1: ["RW", "RWpm"], 2: ["Full4a", "Confirm2a"], 3: ["Agency3a", "Agency4a"]}
# blocks scored by the model comparison of each task
DEFAULT_BLOCK_FILTER = {
    1: {"feedback_mode": None, "mixed": None},
    2: {"feedback_mode": "full", "mixed": None},
    3: {"feedback_mode": None, "mixed": True},
}

DEFAULTS: dict[str, Any] = {
    "experiment": None,
    "task_id": 1,
    "agent": "cogsim",
    "n_runs": 50,
    "seed": 0,
    "out": None,
    "models": None,
    "block_filter": None,
    "cogsim": {"model": "RWpm", "rates": [0.6, 0.2], "beta": 10.0},
    "priors": {"rate_a": 1.1, "rate_b": 1.1, "beta_shape": 1.2, "beta_scale": 5.0},
    "fit": {"n_restarts": 10, "beta_max": 50.0},
    "metarl": {
        "episodes_total": 5000,
        "batch_size": 64,
        "learning_rate": 0.0003,
        "gamma": 0.8,
        "critic_weight": 0.5,
        "entropy_start": 1.0,
        "checkpoint": None,
        "greedy": False,
    },
    "endpoint": {
        "base_url": None,
        "model": None,
        "api_key_env": "LLM_API_KEY",
        "timeout": 60.0,
        "retries": 3,
        "max_concurrency": 1,
    },
    "ingest": {"path": None},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path: Optional[str] = None, **overrides) -> "ExperimentConfig":
        data = {}
        if path is not None:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a mapping")
        cfg = _merge(DEFAULTS, data)
        for key, val in overrides.items():
            if val is not None:
                cfg[key] = val
        return cls(cfg).validated()

    def validated(self) -> "ExperimentConfig":
        r = self.raw
        if r["task_id"] not in (1, 2, 3):
            raise ConfigError(f"task_id must be 1, 2 or 3, got {r['task_id']!r}")
        if r["agent"] not in AGENTS:
            raise ConfigError(f"agent must be one of {AGENTS}, got {r['agent']!r}")
        if int(r["n_runs"]) < 1:
            raise ConfigError("n_runs must be positive")
        if r["models"] is None:
            r["models"] = list(DEFAULT_MODELS[r["task_id"]])
        for m in r["models"]:
            if m not in MODELS:
                raise ConfigError(f"unknown model_id {m!r}; choose from {sorted(MODELS)}")
        if r["block_filter"] is None:
            r["block_filter"] = dict(DEFAULT_BLOCK_FILTER[r["task_id"]])
        if r["experiment"] is None:
            r["experiment"] = f"task{r['task_id']}_{r['agent']}"
        if r["out"] is None:
            r["out"] = str(Path("reports") / r["experiment"])
        try:
            self.cogsim_params()
        except ValueError as exc:
            raise ConfigError(f"cogsim: {exc}") from None
        return self

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def hash(self) -> str:
        # the output location does not change what is computed
        content = {k: v for k, v in self.raw.items() if k != "out"}
        canon = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    @property
    def run_seeds(self) -> list[int]:
        return [int(self.raw["seed"]) + i for i in range(int(self.raw["n_runs"]))]

    def cogsim_params(self):
        c = self.raw["cogsim"]
        model = get_model(c["model"])
        params = ParamVector(tuple(c["rates"]), float(c["beta"]))
        params.check(model)
        return model, params

    def priors(self) -> PriorSpec:
        return PriorSpec(**self.raw["priors"])

    def fit_config(self) -> FitConfig:
        return FitConfig(seed=int(self.raw["seed"]), **self.raw["fit"])

    def agent_config(self) -> AgentConfig:
        m = {k: v for k, v in self.raw["metarl"].items() if k not in ("checkpoint", "greedy")}
        return AgentConfig.for_task(self.raw["task_id"], **m)
