import itertools
import json
import math

import numpy as np
import pytest
from scipy import stats

from asymbelief.analysis import (ReportBundle, independent_t_test, learning_rate_summary,
                                 paired_t_test, regret_curve, report)
from asymbelief.cogmodel import ParamVector, get_model, simulate_agent
from asymbelief.fitting import FitResult, compare_models
from asymbelief.tasks import TaskEnv, Transcript, build_task, expected_regret

from conftest import random_transcript


def scripted(task_id, seed, choose):
    task = build_task(task_id, seed)
    env = TaskEnv(task, np.random.default_rng(seed))
    while not env.done:
        block, _ = env.current
        forced = env.current_forced
        env.step(forced if forced is not None else choose(block))
    return Transcript(task_id, "cogsim", seed, env.records, run_id=seed, task=task)


def fake_fit(model_id, rates, beta=2.0):
    return FitResult(model_id, ParamVector(rates, beta), -50.0, -52.0, 105.0, 96, len(rates) + 1, 10, True)


class TestRegretCurve:
    def test_optimal_agent_flat_zero(self):
        runs = [scripted(1, s, lambda b: b.best_option) for s in range(5)]
        curve = regret_curve(runs)
        assert curve.mean.shape == (24,)
        assert np.all(curve.mean == 0) and np.all(curve.ci == 0)

    def test_random_agent_near_baseline(self):
        runs = [random_transcript(1, s) for s in range(200)]
        curve = regret_curve(runs)
        assert curve.n == 200
        assert abs(curve.mean.mean() - 0.0625) < 0.005
        inside = np.abs(curve.mean - 0.0625) <= curve.ci
        assert inside.mean() >= 0.8

    @pytest.mark.parametrize("task_id,sel,length", [(2, {"feedback_mode": "full"}, 20),
                                                     (2, {"feedback_mode": "partial"}, 20),
                                                     (3, {"mixed": True}, 40), (3, {"mixed": False}, 40)])
    def test_positions_count_free_trials(self, task_id, sel, length):
        runs = [random_transcript(task_id, s) for s in range(4)]
        curve = regret_curve(runs, **sel)
        assert curve.mean.shape == (length,)
        hi, lo = runs[0].task.reward_values
        assert np.all(curve.mean >= 0) and np.all(curve.mean <= 0.3 * (hi - lo) + 1e-12)

    def test_hand_computed_mean(self):
        tr = random_transcript(1, 3)
        curve = regret_curve([tr])
        first = [r for r in tr.records if r.trial_index == 0]
        expected = np.mean([expected_regret(tr.task.block(r.block_id), r.chosen_index, tr.task.reward_values)
                            for r in first])
        assert curve.mean[0] == pytest.approx(expected)

    def test_realized_metric(self):
        runs = [random_transcript(1, s) for s in range(100)]
        realized = regret_curve(runs, metric="realized")
        assert abs(realized.mean.mean() - 0.0625) < 0.01
        with pytest.raises(ValueError):
            regret_curve(runs, metric="other")

    def test_empty_selection(self):
        with pytest.raises(ValueError):
            regret_curve([random_transcript(1, 0)], feedback_mode="full")


class TestTTests:
    def test_equal_samples(self):
        r = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (r.statistic, r.p_value) == (0.0, 1.0)
        r = independent_t_test([2.0, 2.0], [2.0, 2.0])
        assert (r.statistic, r.p_value) == (0.0, 1.0)

    def test_paired_hand_value(self):
        r = paired_t_test([1, 2, 3], [0, 0, 0])
        assert r.statistic == pytest.approx(2 * math.sqrt(3), abs=1e-12)
        assert r.df == 2 and r.variant == "paired"

    def test_against_scipy(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=12), rng.normal(0.5, size=12)
        ours = paired_t_test(x, y)
        ref = stats.ttest_rel(x, y)
        assert ours.statistic == pytest.approx(ref.statistic) and ours.p_value == pytest.approx(ref.pvalue)
        ours = independent_t_test(x, y[:9])
        ref = stats.ttest_ind(x, y[:9])
        assert ours.statistic == pytest.approx(ref.statistic) and ours.p_value == pytest.approx(ref.pvalue)
        assert ours.df == 19

    def test_insufficient_data(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [2.0])
        with pytest.raises(ValueError):
            paired_t_test([1.0, 2.0], [2.0])
        with pytest.raises(ValueError):
            independent_t_test([1.0], [2.0, 3.0])

    def test_p_value_ordering_matches_resampling(self):
        rng = np.random.default_rng(1)
        t_p, perm_p = [], []
        for _ in range(30):
            d = rng.normal(rng.uniform(-1, 1), 1.0, size=8)
            t_p.append(paired_t_test(d, np.zeros(8)).p_value)
            obs = abs(d.mean())
            flips = np.array(list(itertools.product((-1, 1), repeat=8)))
            perm_p.append(np.mean(np.abs((flips * d).mean(axis=1)) >= obs - 1e-12))
        assert stats.spearmanr(t_p, perm_p).statistic > 0.9


class TestLearningRates:
    def test_identical_fits(self):
        m = get_model("RWpm")
        s = learning_rate_summary([fake_fit("RWpm", (0.6, 0.2))] * 5, m)
        assert s["alpha_pos"] == pytest.approx(0.6) and s["alpha_neg"] == pytest.approx(0.2)
        assert np.all(s.ci == 0)
        assert s.tests[("alpha_pos", "alpha_neg")].p_value == 0.0

    def test_model_mismatch(self):
        with pytest.raises(ValueError):
            learning_rate_summary([fake_fit("RW", (0.4,))], get_model("RWpm"))

    def test_contrasts_per_model(self):
        m = get_model("Full4a")
        rng = np.random.default_rng(0)
        fits = [fake_fit("Full4a", tuple(rng.uniform(0.1, 0.9, 4))) for _ in range(6)]
        s = learning_rate_summary(fits, m)
        assert set(s.tests) == {("alpha_chosen_pos", "alpha_chosen_neg"),
                                ("alpha_unchosen_pos", "alpha_unchosen_neg")}


class TestReport:
    def bundle(self):
        rw, pm = get_model("RW"), get_model("RWpm")
        runs = [simulate_agent(build_task(1, s), pm, ParamVector((0.6, 0.2), 10.0), np.random.default_rng(s),
                               run_id=s) for s in range(4)]
        comp = compare_models(runs, [rw, pm])
        b = ReportBundle("unit", "abc123", [0, 1, 2, 3])
        b.curves["all"] = regret_curve(runs)
        b.comparisons["models"] = comp
        b.fits["RWpm"] = (pm, comp.fits["RWpm"])
        b.learning_rates["RWpm"] = learning_rate_summary(comp.fits["RWpm"], pm)
        b.tests["first_vs_last"] = paired_t_test(b.curves["all"].per_run[:, 0], b.curves["all"].per_run[:, -1])
        return b

    def test_empty_bundle_manifest_only(self, tmp_path):
        written = report(ReportBundle("empty"), tmp_path / "r")
        assert [p.name for p in written] == ["manifest.json"]
        manifest = json.loads(written[0].read_text())
        assert manifest["artifacts"] == [] and manifest["experiment"] == "empty"

    def test_files_and_manifest(self, tmp_path):
        written = report(self.bundle(), tmp_path)
        names = {p.name for p in written}
        assert {"regret_curve.csv", "pp_models.csv", "fits_RWpm.csv", "learning_rates_RWpm.csv",
                "rate_tests_RWpm.csv", "tests.csv", "manifest.json"} == names
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert all(e["config_hash"] == "abc123" for e in manifest["artifacts"])
        assert len(manifest["artifacts"]) == len(names) - 1

    def test_byte_identical(self, tmp_path):
        b = self.bundle()
        report(b, tmp_path / "a")
        report(b, tmp_path / "b")
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_unwritable_destination(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            report(ReportBundle("x"), blocker / "sub")
