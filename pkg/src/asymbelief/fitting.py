"""MAP estimation of RW-family parameters and BIC-based model comparison."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special, stats

from .cogmodel import ModelSpec, ParamVector, TrialArrays, nll_arrays, transcript_arrays
from .tasks import Transcript

log = logging.getLogger(__name__)

RATE_EPS = 1e-6
BETA_MIN = 1e-6


@dataclass(frozen=True)
class PriorSpec:
    """Independent Beta priors on learning rates and a Gamma prior on beta.

    The Gamma is shape/scale (mean shape * scale = 6).
    """

    rate_a: float = 1.1
    rate_b: float = 1.1
    beta_shape: float = 1.2
    beta_scale: float = 5.0

    def log_density(self, rates: Sequence[float], beta: float) -> float:
        rates = np.asarray(rates, dtype=float)
        # closed boundaries have zero density for a, b, shape > 1
        if np.any(rates <= 0) or np.any(rates >= 1) or beta <= 0:
            return -math.inf
        lbeta = special.betaln(self.rate_a, self.rate_b)
        lp = np.sum((self.rate_a - 1) * np.log(rates) + (self.rate_b - 1) * np.log1p(-rates) - lbeta)
        lp += ((self.beta_shape - 1) * math.log(beta) - beta / self.beta_scale
               - math.lgamma(self.beta_shape) - self.beta_shape * math.log(self.beta_scale))
        return float(lp)

    def mode(self, n_rates: int) -> tuple[np.ndarray, float]:
        rate_mode = (self.rate_a - 1) / (self.rate_a + self.rate_b - 2)
        return np.full(n_rates, rate_mode), (self.beta_shape - 1) * self.beta_scale

    def sample(self, n_rates: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        return (rng.beta(self.rate_a, self.rate_b, size=n_rates),
                float(rng.gamma(self.beta_shape, self.beta_scale)))


@dataclass(frozen=True)
class FitConfig:
    n_restarts: int = 10
    seed: int = 0
    beta_max: float = 50.0
    xatol: float = 1e-6
    fatol: float = 1e-8
    maxiter: int = 4000
    converge_tol: float = 1e-3


@dataclass
class FitResult:
    model_id: str
    params: ParamVector
    log_likelihood: float
    log_posterior: float
    bic: float
    n_choices: int
    n_params: int
    n_restarts_used: int
    converged: bool
    run_id: int = 0
    start_objectives: list[float] = field(default_factory=list, repr=False)


class FitError(RuntimeError):
    pass


def _clip_rates(rates) -> np.ndarray:
    return np.clip(np.asarray(rates, dtype=float), RATE_EPS, 1 - RATE_EPS)


def _log_posterior_arrays(data: TrialArrays, model: ModelSpec, rates, beta, priors: PriorSpec) -> float:
    rates = _clip_rates(rates)
    lp = priors.log_density(rates, beta)
    if not math.isfinite(lp):
        return -math.inf
    return lp - nll_arrays(data, model, rates, beta)


def log_posterior(transcript: Transcript, model: ModelSpec, params: ParamVector,
                  priors: PriorSpec = PriorSpec()) -> float:
    """Log likelihood of the free choices plus log prior density.

    Rates are clipped into ``[1e-6, 1 - 1e-6]`` before the prior is evaluated.
    Returns ``-inf`` where the prior density vanishes (beta = 0).
    """
    params.check(model)
    rates = _clip_rates(params.rates)
    lp = priors.log_density(rates, params.beta)
    if not math.isfinite(lp) or not transcript.records:
        return lp
    return lp - nll_arrays(transcript_arrays(transcript), model, rates, params.beta)


def to_unconstrained(rates, beta) -> np.ndarray:
    rates = _clip_rates(rates)
    return np.append(special.logit(rates), math.log(max(beta, BETA_MIN)))


def from_unconstrained(x, beta_max: float = 50.0) -> tuple[np.ndarray, float]:
    x = np.asarray(x, dtype=float)
    rates = _clip_rates(special.expit(x[:-1]))
    beta = float(np.clip(math.exp(min(x[-1], 700.0)), BETA_MIN, beta_max))
    return rates, beta


def bic(k: int, n: int, log_likelihood: float) -> float:
    if n < 1:
        raise ValueError("BIC needs at least one choice")
    if k < 0:
        raise ValueError("k must be nonnegative")
    return k * math.log(n) - 2.0 * log_likelihood


def posterior_probabilities(bics: Sequence[float]) -> np.ndarray:
    """Posterior model probabilities under a uniform model prior."""
    b = np.asarray(bics, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("BICs must be finite")
    w = np.exp(-0.5 * (b - b.min()))
    return w / w.sum()


def map_fit(transcript: Transcript, model: ModelSpec, priors: PriorSpec = PriorSpec(),
            config: FitConfig = FitConfig()) -> FitResult:
    """Maximum a posteriori fit with Nelder-Mead restarts.

    The first start is the prior mode; the rest are prior draws seeded from
    ``config.seed`` and the transcript's run_id.
    """
    data = transcript_arrays(transcript)
    n = data.n_choices
    if n == 0:
        raise FitError("transcript has no free trials to fit")

    def objective(x):
        rates, beta = from_unconstrained(x, config.beta_max)
        val = _log_posterior_arrays(data, model, rates, beta, priors)
        return -val if math.isfinite(val) else 1e300

    rng = np.random.default_rng([config.seed, transcript.run_id])
    starts = [priors.mode(model.n_rates)]
    starts += [priors.sample(model.n_rates, rng) for _ in range(config.n_restarts - 1)]

    results = []
    start_objectives = []
    for rates0, beta0 in starts:
        x0 = to_unconstrained(rates0, min(beta0, config.beta_max))
        f0 = objective(x0)
        start_objectives.append(-f0)
        res = optimize.minimize(objective, x0, method="Nelder-Mead",
                                options={"xatol": config.xatol, "fatol": config.fatol,
                                         "maxiter": config.maxiter * model.n_params,
                                         "maxfev": config.maxiter * model.n_params})
        if res.fun < f0:
            results.append((float(res.fun), res.x))
        else:
            results.append((f0, x0))
    results = [r for r in results if r[0] < 1e300]
    if not results:
        raise FitError("objective is not finite at any start point")
    results.sort(key=lambda r: r[0])
    best_f, best_x = results[0]
    converged = len(results) > 1 and abs(results[1][0] - best_f) < config.converge_tol
    rates, beta = from_unconstrained(best_x, config.beta_max)
    params = ParamVector(tuple(rates), beta)
    ll = -nll_arrays(data, model, rates, beta)
    return FitResult(
        model_id=model.model_id,
        params=params,
        log_likelihood=ll,
        log_posterior=-best_f,
        bic=bic(model.n_params, n, ll),
        n_choices=n,
        n_params=model.n_params,
        n_restarts_used=len(starts),
        converged=converged,
        run_id=transcript.run_id,
        start_objectives=start_objectives,
    )


@dataclass
class ComparisonResult:
    model_ids: list[str]
    run_ids: list[int]
    fits: dict[str, list[Optional[FitResult]]]
    pp: np.ndarray                       # (n_runs, n_models); NaN rows for failed runs
    errors: dict[int, str] = field(default_factory=dict)

    def _valid(self) -> np.ndarray:
        return self.pp[~np.isnan(self.pp).any(axis=1)]

    @property
    def mean_pp(self) -> np.ndarray:
        return self._valid().mean(axis=0)

    @property
    def pp_ci(self) -> np.ndarray:
        """95% Student-t CI half-widths of the mean PP per model."""
        v = self._valid()
        n = v.shape[0]
        if n < 2:
            return np.zeros(v.shape[1])
        return stats.t.ppf(0.975, n - 1) * v.std(axis=0, ddof=1) / math.sqrt(n)

    def summary(self) -> dict[str, tuple[float, float]]:
        return {m: (float(mu), float(ci)) for m, mu, ci in zip(self.model_ids, self.mean_pp, self.pp_ci)}


def compare_models(transcripts: Sequence[Transcript], models: Sequence[ModelSpec],
                   priors: PriorSpec = PriorSpec(), config: FitConfig = FitConfig(),
                   jobs: int = 1) -> ComparisonResult:
    """Fit every model to every transcript and compute per-run posterior probabilities.

    A failing fit marks its run as failed (NaN PP row, message in ``errors``)
    without aborting the rest of the batch.
    """
    if not transcripts:
        raise ValueError("need at least one transcript")
    tasks = [(i, m) for i in range(len(transcripts)) for m in models]

    def run(item):
        i, m = item
        try:
            return map_fit(transcripts[i], m, priors, config)
        except FitError as exc:
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(run, tasks))
    else:
        outcomes = [run(t) for t in tasks]

    fits: dict[str, list[Optional[FitResult]]] = {m.model_id: [None] * len(transcripts) for m in models}
    errors: dict[int, str] = {}
    for (i, m), out in zip(tasks, outcomes):
        if isinstance(out, Exception):
            errors[transcripts[i].run_id] = f"{m.model_id}: {out}"
            log.warning("fit failed for run %s model %s: %s", transcripts[i].run_id, m.model_id, out)
        else:
            fits[m.model_id][i] = out

    pp = np.full((len(transcripts), len(models)), np.nan)
    for i in range(len(transcripts)):
        row = [fits[m.model_id][i] for m in models]
        if all(f is not None for f in row):
            pp[i] = posterior_probabilities([f.bic for f in row])
    return ComparisonResult([m.model_id for m in models], [t.run_id for t in transcripts], fits, pp, errors)


FIT_COLUMNS_TAIL = ("beta", "logL", "BIC", "PP")


def fit_table(fits: Sequence[FitResult], model: ModelSpec,
              pp: Optional[Sequence[float]] = None) -> str:
    """Delimited table: model_id, run_id, one column per rate slot, beta, logL, BIC, PP."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model_id", "run_id") + model.rate_names + FIT_COLUMNS_TAIL)
    for i, f in enumerate(fits):
        if f is None:
            continue
        ppv = "" if pp is None else f"{pp[i]:.10g}"
        w.writerow([f.model_id, f.run_id] + [f"{r:.10g}" for r in f.params.rates]
                   + [f"{f.params.beta:.10g}", f"{f.log_likelihood:.10g}", f"{f.bic:.10g}", ppv])
    return buf.getvalue()


def comparison_table(result: ComparisonResult) -> str:
    """Per-run PP table with a trailing mean row and a CI row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id"] + [f"PP_{m}" for m in result.model_ids])
    for run_id, row in zip(result.run_ids, result.pp):
        w.writerow([run_id] + ["" if np.isnan(v) else f"{v:.10g}" for v in row])
    w.writerow(["mean"] + [f"{v:.10g}" for v in result.mean_pp])
    w.writerow(["ci95"] + [f"{v:.10g}" for v in result.pp_ci])
    return buf.getvalue()
