"""Regret curves, learning-rate summaries, t-tests and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .cogmodel import ModelSpec
from .fitting import ComparisonResult, FitResult, comparison_table, fit_table
from .tasks import FREE, Transcript, expected_regret, realized_regret


def t_ci(samples: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, 95% Student-t CI half-width and SEM along ``axis``."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    mean = samples.mean(axis=axis)
    if n < 2:
        zero = np.zeros_like(mean)
        return mean, zero, zero
    sem = samples.std(axis=axis, ddof=1) / math.sqrt(n)
    return mean, stats.t.ppf(0.975, n - 1) * sem, sem


@dataclass
class CurveSummary:
    mean: np.ndarray
    ci: np.ndarray
    sem: np.ndarray
    n: int
    per_run: np.ndarray = field(repr=False)

    def rows(self):
        for i, (m, c, s) in enumerate(zip(self.mean, self.ci, self.sem)):
            yield i + 1, m, c, s, self.n


def regret_curve(transcripts: Sequence[Transcript], feedback_mode: Optional[str] = None,
                 mixed: Optional[bool] = None, metric: str = "expected") -> CurveSummary:
    """Regret by free-trial position within a block.

    Positions count free trials only. Each run is averaged over its selected
    blocks before the CI is taken across runs.
    """
    per_run = []
    for tr in transcripts:
        if tr.task is None:
            raise ValueError(f"run {tr.run_id}: regret needs the generating TaskSpec")
        sub = tr.select_blocks(feedback_mode=feedback_mode, mixed=mixed)
        curves = []
        for bid, recs in sub.blocks().items():
            block = sub.task.block(bid)
            free = [r for r in recs if r.kind == FREE]
            if metric == "expected":
                curves.append([expected_regret(block, r.chosen_index, sub.task.reward_values) for r in free])
            elif metric == "realized":
                curves.append([realized_regret(block, r.chosen_index, r.reward_chosen, sub.task.reward_values)
                               for r in free])
            else:
                raise ValueError(f"unknown regret metric {metric!r}")
        if curves:
            lengths = {len(c) for c in curves}
            if len(lengths) != 1:
                raise ValueError(f"run {tr.run_id}: selected blocks differ in free-trial count {sorted(lengths)}")
            per_run.append(np.mean(curves, axis=0))
    if not per_run:
        raise ValueError("no blocks match the selection")
    arr = np.array(per_run)
    mean, ci, sem = t_ci(arr)
    return CurveSummary(mean, ci, sem, arr.shape[0], arr)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: float
    p_value: float
    mean_difference: float
    variant: str


def _t_result(diff_mean: float, se: float, df: float, variant: str) -> TestResult:
    if se == 0:
        if diff_mean == 0:
            return TestResult(0.0, df, 1.0, 0.0, variant)
        return TestResult(math.copysign(math.inf, diff_mean), df, 0.0, diff_mean, variant)
    t = diff_mean / se
    return TestResult(t, df, float(2 * stats.t.sf(abs(t), df)), diff_mean, variant)


def paired_t_test(x, y) -> TestResult:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("paired test needs two samples of equal length >= 2")
    d = x - y
    n = d.size
    return _t_result(float(d.mean()), float(d.std(ddof=1) / math.sqrt(n)), n - 1, "paired")


def independent_t_test(x, y) -> TestResult:
    """Student's two-sample test with pooled variance."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    nx, ny = x.size, y.size
    if nx < 2 or ny < 2:
        raise ValueError("independent test needs at least two observations per sample")
    df = nx + ny - 2
    pooled = ((nx - 1) * x.var(ddof=1) + (ny - 1) * y.var(ddof=1)) / df
    se = math.sqrt(pooled * (1 / nx + 1 / ny))
    return _t_result(float(x.mean() - y.mean()), se, df, "independent")


# rate-slot pairs compared for each model
SLOT_CONTRASTS = {
    "RW": (),
    "RWpm": (("alpha_pos", "alpha_neg"),),
    "Full4a": (("alpha_chosen_pos", "alpha_chosen_neg"), ("alpha_unchosen_pos", "alpha_unchosen_neg")),
    "Confirm2a": (("alpha_confirm", "alpha_disconfirm"),),
    "Agency3a": (("alpha_free_pos", "alpha_free_neg"),),
    "Agency4a": (("alpha_free_pos", "alpha_free_neg"), ("alpha_forced_pos", "alpha_forced_neg")),
}


@dataclass
class LearningRateSummary:
    model_id: str
    names: tuple[str, ...]
    mean: np.ndarray
    ci: np.ndarray
    sem: np.ndarray
    n: int
    beta_mean: float
    tests: dict[tuple[str, str], TestResult]

    def __getitem__(self, name: str) -> float:
        return float(self.mean[self.names.index(name)])


def learning_rate_summary(fits: Sequence[FitResult], model: ModelSpec) -> LearningRateSummary:
    fits = [f for f in fits if f is not None]
    if not fits:
        raise ValueError("no fits to summarize")
    if any(f.model_id != model.model_id for f in fits):
        raise ValueError(f"all fits must belong to {model.model_id}")
    rates = np.array([f.params.rates for f in fits])
    mean, ci, sem = t_ci(rates)
    tests = {}
    if len(fits) >= 2:
        for a, b in SLOT_CONTRASTS.get(model.model_id, ()):
            ia, ib = model.rate_names.index(a), model.rate_names.index(b)
            tests[(a, b)] = paired_t_test(rates[:, ia], rates[:, ib])
    return LearningRateSummary(model.model_id, model.rate_names, mean, ci, sem, len(fits),
                               float(np.mean([f.params.beta for f in fits])), tests)


# -- report ----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float) or isinstance(v, np.floating):
        return f"{float(v):.10g}"
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def curve_table(curves: dict[str, CurveSummary]) -> str:
    """Long-format curve data: one row per (arm, position)."""
    rows = []
    for arm in sorted(curves):
        for pos, m, c, s, n in curves[arm].rows():
            rows.append((arm, pos, m, c, s, n))
    return _csv(("arm", "position", "mean", "ci95", "sem", "n"), rows)


def learning_rate_table(summary: LearningRateSummary) -> str:
    rows = [(summary.model_id, name, m, c, s, summary.n)
            for name, m, c, s in zip(summary.names, summary.mean, summary.ci, summary.sem)]
    return _csv(("model_id", "rate", "mean", "ci95", "sem", "n"), rows)


def test_table(summary: LearningRateSummary) -> str:
    rows = [(summary.model_id, a, b, r.variant, r.statistic, r.df, r.p_value, r.mean_difference)
            for (a, b), r in summary.tests.items()]
    return _csv(("model_id", "rate_a", "rate_b", "variant", "t", "df", "p", "mean_diff"), rows)


@dataclass
class ReportBundle:
    experiment: str
    config_hash: str = ""
    seeds: list = field(default_factory=list)
    curves: dict[str, CurveSummary] = field(default_factory=dict)
    comparisons: dict[str, ComparisonResult] = field(default_factory=dict)
    fits: dict[str, tuple[ModelSpec, list]] = field(default_factory=dict)
    learning_rates: dict[str, LearningRateSummary] = field(default_factory=dict)
    tests: dict[str, TestResult] = field(default_factory=dict)


def report(bundle: ReportBundle, out_dir) -> list[Path]:
    """Write the bundle's tables plus a ``manifest.json``; returns written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    files: dict[str, str] = {}
    if bundle.curves:
        files["regret_curve.csv"] = curve_table(bundle.curves)
    for name, comp in sorted(bundle.comparisons.items()):
        files[f"pp_{name}.csv"] = comparison_table(comp)
    for name, (model, fits) in sorted(bundle.fits.items()):
        pp = None
        for comp in bundle.comparisons.values():
            if model.model_id in comp.model_ids:
                pp = comp.pp[:, comp.model_ids.index(model.model_id)]
                break
        files[f"fits_{name}.csv"] = fit_table(fits, model, pp)
    for name, lr in sorted(bundle.learning_rates.items()):
        files[f"learning_rates_{name}.csv"] = learning_rate_table(lr)
        if lr.tests:
            files[f"rate_tests_{name}.csv"] = test_table(lr)
    if bundle.tests:
        rows = [(name, r.variant, r.statistic, r.df, r.p_value, r.mean_difference)
                for name, r in sorted(bundle.tests.items())]
        files["tests.csv"] = _csv(("test", "variant", "t", "df", "p", "mean_diff"), rows)

    written = []
    entries = []
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        written.append(path)
        entries.append({"path": name, "sha256": hashlib.sha256(text.encode()).hexdigest(),
                        "config_hash": bundle.config_hash})
    manifest = {"experiment": bundle.experiment, "config_hash": bundle.config_hash,
                "seeds": list(bundle.seeds), "artifacts": entries}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(mpath)
    return written
