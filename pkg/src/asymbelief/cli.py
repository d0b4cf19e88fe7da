"""Command-line entry point.

Subcommands mirror the pipeline stages::

    asymbelief simulate   --config exp.yaml      # transcripts/run_XXX.jsonl
    asymbelief train      --config exp.yaml      # checkpoint.npz + train_log.csv
    asymbelief evaluate   --config exp.yaml      # Meta-RL transcripts
    asymbelief fit        --config exp.yaml      # fits_<model>.csv
    asymbelief compare    --config exp.yaml      # pp.csv
    asymbelief report     --config exp.yaml      # regret curves, tables, manifest
    asymbelief gen-prompts --config exp.yaml     # rendered prompts per run
    asymbelief ingest     --config exp.yaml FILE # validate external transcripts
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, fitting
from .cogmodel import get_model, simulate_agent
from .config import ConfigError, ExperimentConfig
from .llm_io import (ChatClient, EndpointConfig, SessionAborted, ingest,
                     replay_prompts, run_session)
from .tasks import (TranscriptFormatError, Transcript, build_task, dump_transcripts,
                    load_transcripts, transcript_path)

log = logging.getLogger("asymbelief")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class PartialFailure(Exception):
    def __init__(self, failures: dict):
        super().__init__(f"{len(failures)} run(s) failed")
        self.failures = failures


def _transcript_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "transcripts"


def _checkpoint_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg["metarl"]["checkpoint"] or cfg.out / "checkpoint.npz")


def _write_runs(cfg: ExperimentConfig, transcripts: Sequence[Transcript]) -> list[Path]:
    d = _transcript_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for tr in transcripts:
        p = transcript_path(d, tr.run_id)
        dump_transcripts([tr], p)
        paths.append(p)
    return paths


def _read_runs(cfg: ExperimentConfig, files: Sequence[str] = ()) -> list[Transcript]:
    paths = [Path(f) for f in files] or sorted(_transcript_dir(cfg).glob("run_*.jsonl"))
    if not paths:
        raise UsageError(f"no transcripts found in {_transcript_dir(cfg)}; run `simulate` or `evaluate` first")
    out = []
    for p in paths:
        if not p.exists():
            raise UsageError(f"missing transcript file {p}")
        out.extend(load_transcripts(p))
    return out


def _selected(cfg: ExperimentConfig, transcripts: Sequence[Transcript]) -> list[Transcript]:
    bf = cfg["block_filter"]
    return [t.select_blocks(feedback_mode=bf.get("feedback_mode"), mixed=bf.get("mixed")) for t in transcripts]


def cmd_simulate(cfg: ExperimentConfig, args) -> list[Path]:
    agent = cfg["agent"]
    seeds = cfg.run_seeds
    if agent == "cogsim":
        model, params = cfg.cogsim_params()
        transcripts = [simulate_agent(build_task(cfg["task_id"], s), model, params,
                                      np.random.default_rng(s), run_id=i, seed=s)
                       for i, s in enumerate(seeds)]
        return _write_runs(cfg, transcripts)
    if agent == "metarl":
        return cmd_evaluate(cfg, args)
    if agent == "ingest":
        src = cfg["ingest"]["path"]
        if not src:
            raise UsageError("agent 'ingest' needs ingest.path")
        return _write_runs(cfg, ingest(src))
    ep = cfg["endpoint"]
    if not ep["base_url"] or not ep["model"]:
        raise UsageError("agent 'llm-endpoint' needs endpoint.base_url and endpoint.model")
    client = ChatClient(EndpointConfig(**ep))
    transcripts, failures = [], {}
    try:
        for i, s in enumerate(seeds):
            try:
                transcripts.append(run_session(build_task(cfg["task_id"], s), client,
                                               np.random.default_rng(s), run_id=i, seed=s))
            except SessionAborted as exc:
                failures[i] = str(exc)
                transcripts.append(exc.transcript)
    finally:
        client.close()
    paths = _write_runs(cfg, transcripts)
    if failures:
        raise PartialFailure(failures)
    return paths


def cmd_train(cfg: ExperimentConfig, args) -> list[Path]:
    from .metarl import AgentCheckpoint, train

    config = cfg.agent_config()
    if config.episodes_total == 0:
        log.warning("episodes_total=0: writing an untrained checkpoint")
    cfg.out.mkdir(parents=True, exist_ok=True)
    resume = AgentCheckpoint.load(args.resume) if getattr(args, "resume", None) else None
    log_path = cfg.out / "train_log.csv"

    def progress(ep, reward):
        if ep % 100 == 0:
            log.info("episode %d mean reward %.4f", ep, reward)

    ckpt = train(config, int(cfg["seed"]), log_path=log_path, resume=resume, progress=progress)
    path = _checkpoint_path(cfg)
    ckpt.save(path)
    return [path, log_path]


def cmd_evaluate(cfg: ExperimentConfig, args) -> list[Path]:
    from .metarl import AgentCheckpoint, evaluate_runs

    path = _checkpoint_path(cfg)
    if not path.exists():
        raise UsageError(f"no Meta-RL checkpoint at {path}; run `train` first")
    ckpt = AgentCheckpoint.load(path)
    if ckpt.config.task_id != cfg["task_id"]:
        raise UsageError(f"checkpoint was trained on task {ckpt.config.task_id}, config asks for {cfg['task_id']}")
    transcripts = evaluate_runs(ckpt, int(cfg["n_runs"]), int(cfg["seed"]), greedy=bool(cfg["metarl"]["greedy"]))
    return _write_runs(cfg, transcripts)


def _compare(cfg: ExperimentConfig, transcripts, jobs: int) -> fitting.ComparisonResult:
    models = [get_model(m) for m in cfg["models"]]
    return fitting.compare_models(_selected(cfg, transcripts), models, cfg.priors(), cfg.fit_config(), jobs=jobs)


def cmd_fit(cfg: ExperimentConfig, args) -> list[Path]:
    transcripts = _read_runs(cfg, args.transcripts)
    comp = _compare(cfg, transcripts, args.jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, mid in enumerate(comp.model_ids):
        p = cfg.out / f"fits_{mid}.csv"
        p.write_text(fitting.fit_table(comp.fits[mid], get_model(mid), comp.pp[:, j]))
        paths.append(p)
    if comp.errors:
        raise PartialFailure(comp.errors)
    return paths


def cmd_compare(cfg: ExperimentConfig, args) -> list[Path]:
    transcripts = _read_runs(cfg, args.transcripts)
    comp = _compare(cfg, transcripts, args.jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    p = cfg.out / "pp.csv"
    p.write_text(fitting.comparison_table(comp))
    if comp.errors:
        raise PartialFailure(comp.errors)
    return [p]


REGRET_ARMS = {
    1: {"all": {}},
    2: {"partial": {"feedback_mode": "partial"}, "full": {"feedback_mode": "full"}},
    3: {"free": {"mixed": False}, "mixed": {"mixed": True}},
}


def build_bundle(cfg: ExperimentConfig, transcripts: Sequence[Transcript], jobs: int = 1) -> analysis.ReportBundle:
    bundle = analysis.ReportBundle(cfg["experiment"], cfg.hash, cfg.run_seeds)
    if all(t.task is not None for t in transcripts):
        for arm, sel in REGRET_ARMS[cfg["task_id"]].items():
            try:
                bundle.curves[arm] = analysis.regret_curve(transcripts, **sel)
            except ValueError as exc:
                log.warning("regret curve %s skipped: %s", arm, exc)
        arms = list(bundle.curves)
        if len(arms) == 2:
            a, b = (bundle.curves[k].per_run[:, -1] for k in arms)
            bundle.tests[f"final_regret_{arms[0]}_vs_{arms[1]}_paired"] = analysis.paired_t_test(a, b)
            bundle.tests[f"final_regret_{arms[0]}_vs_{arms[1]}_independent"] = analysis.independent_t_test(a, b)
        for arm, curve in bundle.curves.items():
            if curve.per_run.shape[0] >= 2:
                bundle.tests[f"regret_first_vs_last_{arm}_paired"] = analysis.paired_t_test(
                    curve.per_run[:, 0], curve.per_run[:, -1])
    comp = _compare(cfg, transcripts, jobs)
    bundle.comparisons["models"] = comp
    for mid in comp.model_ids:
        model = get_model(mid)
        fits = comp.fits[mid]
        bundle.fits[mid] = (model, fits)
        if any(f is not None for f in fits):
            bundle.learning_rates[mid] = analysis.learning_rate_summary(fits, model)
    return bundle


def cmd_report(cfg: ExperimentConfig, args) -> list[Path]:
    transcripts = _read_runs(cfg, args.transcripts)
    bundle = build_bundle(cfg, transcripts, args.jobs)
    paths = analysis.report(bundle, cfg.out / "report")
    failures = bundle.comparisons["models"].errors
    if failures:
        raise PartialFailure(failures)
    return paths


def cmd_gen_prompts(cfg: ExperimentConfig, args) -> list[Path]:
    transcripts = _read_runs(cfg, args.transcripts)
    d = cfg.out / "prompts"
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for tr in transcripts:
        rng = np.random.default_rng([int(cfg["seed"]), tr.run_id])
        p = d / f"run_{tr.run_id:03d}.txt"
        p.write_text("\n\n=====\n\n".join(replay_prompts(tr, rng)) + "\n")
        paths.append(p)
    return paths


def cmd_ingest(cfg: ExperimentConfig, args) -> list[Path]:
    if not args.transcripts:
        raise UsageError("ingest needs at least one transcript file")
    transcripts = []
    for f in args.transcripts:
        transcripts.extend(ingest(f))
    return _write_runs(cfg, transcripts)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "report": cmd_report,
    "gen-prompts": cmd_gen_prompts,
    "ingest": cmd_ingest,
}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies suppress defaults so flags work before or after the subcommand
    d = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config", **d)
    common.add_argument("--seed", type=int, help="override the config seed", **d)
    common.add_argument("--jobs", type=int, help="parallel fits (default 1)", **d)
    common.add_argument("--out", help="output directory (default reports/<experiment>)", **d)
    common.add_argument("--task", type=int, dest="task_id", help="override task_id", **d)
    common.add_argument("--agent", help="override agent", **d)
    common.add_argument("--runs", type=int, dest="n_runs", help="override n_runs", **d)
    common.add_argument("--models", help="comma-separated model ids", **d)
    common.add_argument("-v", "--verbose", action="store_true", **d)
    return common


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asymbelief", description=__doc__.splitlines()[0],
                                     parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[_common(True)])
        if name in ("fit", "compare", "report", "gen-prompts", "ingest"):
            p.add_argument("transcripts", nargs="*", help="transcript files (default: <out>/transcripts)")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue training from")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.jobs is None:
        args.jobs = 1
    if not hasattr(args, "transcripts"):
        args.transcripts = []
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        models = args.models.split(",") if args.models else None
        cfg = ExperimentConfig.load(args.config, seed=args.seed, out=args.out, task_id=args.task_id,
                                    agent=args.agent, n_runs=args.n_runs, models=models)
        paths = COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except PartialFailure as exc:
        print(json.dumps({"error": "partial-failure", "message": str(exc),
                          "failures": {str(k): v for k, v in exc.failures.items()}}), file=sys.stderr)
        return EXIT_PARTIAL
    except (TranscriptFormatError, fitting.FitError, RuntimeError, OSError, ValueError) as exc:
        print(json.dumps({"error": "runtime", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
