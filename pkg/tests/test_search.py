from __future__ import annotations

import numpy as np
import pytest

from rankloop.errors import ConfigurationError, SearchFailedError
from rankloop.search import (
    SearchStudy,
    Trial,
    constant_liar_impute,
    run_search,
    tpe_suggest,
)

BOUNDS_1D = {"x": (0.0, 1.0)}


def bowl(params):
    return -((params["x"] - 0.3) ** 2)


def make_study(bounds=None, **kwargs):
    kwargs.setdefault("seed", 42)
    kwargs.setdefault("budget", 100)
    return SearchStudy(bounds=dict(bounds or BOUNDS_1D), **kwargs)


class TestStudyValidation:
    def test_empty_bounds_rejected(self):
        with pytest.raises(ConfigurationError):
            SearchStudy(bounds={})

    def test_inverted_bounds_rejected(self):
        with pytest.raises(ConfigurationError):
            SearchStudy(bounds={"x": (1.0, 0.0)})

    def test_bad_gamma_rejected(self):
        with pytest.raises(ConfigurationError):
            make_study(gamma=1.5)


class TestTpeSuggest:
    def test_empty_study_suggests_within_bounds(self):
        params = tpe_suggest(make_study())
        assert 0.0 <= params["x"] <= 1.0

    def test_deterministic_for_fixed_state(self):
        study = make_study()
        assert tpe_suggest(study) == tpe_suggest(study)

    def test_state_change_changes_suggestion(self):
        study = make_study()
        first = tpe_suggest(study)
        trial = study.suggest()
        study.complete(trial.trial_id, 1.0)
        assert tpe_suggest(study) != first

    def test_bounds_respected_across_modes(self):
        study = make_study(bounds={"x": (0.0, 1.0), "y": (-3.0, -1.0)}, seed=7)
        rng = np.random.default_rng(0)
        for k in range(300):
            trial = study.suggest()
            for name, (low, high) in study.bounds.items():
                assert low <= trial.params[name] <= high
            study.complete(trial.trial_id, float(rng.normal()))

    def test_concentrates_on_bowl_optimum(self):
        # After 200 observed trials the sampler should focus near the
        # dense-grid optimum of the bowl.
        grid = np.linspace(0.0, 1.0, 10001)
        oracle_x = float(grid[np.argmax(-((grid - 0.3) ** 2))])
        study = make_study(budget=200, seed=3)
        run_search(bowl, study)
        suggestions = []
        for _ in range(50):
            trial = study.suggest()
            suggestions.append(trial.params["x"])
        assert abs(float(np.median(suggestions)) - oracle_x) <= 0.1


class TestConstantLiar:
    def test_min_completed_value_used(self):
        study = make_study()
        for value in (1.0, -5.0, 0.2):
            trial = study.suggest()
            study.complete(trial.trial_id, value)
        pending = study.suggest()
        imputed = constant_liar_impute(study)
        assert imputed == {pending.trial_id: -5.0}

    def test_floor_used_when_nothing_completed(self):
        study = make_study()
        pending = study.suggest()
        assert constant_liar_impute(study)[pending.trial_id] == study.liar_floor

    def test_imputation_is_transient(self):
        study = make_study()
        trial = study.suggest()
        study.complete(trial.trial_id, 0.5)
        pending = study.suggest()
        assert pending.trial_id in constant_liar_impute(study)
        study.complete(pending.trial_id, 2.0)
        assert constant_liar_impute(study) == {}
        assert study.trials[pending.trial_id].value == 2.0


class TestRunSearch:
    def test_budget_one(self):
        study = make_study(budget=1)
        best, top5 = run_search(bowl, study)
        assert len(study.completed()) == 1
        assert top5 == [best]

    def test_zero_budget_rejected(self):
        with pytest.raises(ConfigurationError):
            run_search(bowl, make_study(budget=0))

    def test_exactly_budget_trials(self):
        study = make_study(budget=60)
        run_search(bowl, study)
        assert len(study.trials) == 60
        assert len(study.completed()) == 60

    def test_top5_sorted_distinct_trials(self):
        study = make_study(budget=40)
        best, top5 = run_search(bowl, study)
        assert len(top5) == 5
        assert len({t.trial_id for t in top5}) == 5
        values = [t.value for t in top5]
        assert values == sorted(values, reverse=True)
        assert best is top5[0]

    def test_bowl_reaches_oracle_neighborhood(self):
        grid = np.linspace(0.0, 1.0, 10001)
        oracle = float(np.max(-((grid - 0.3) ** 2)))
        study = make_study(budget=500, seed=11)
        best, _ = run_search(bowl, study)
        assert abs(best.value - oracle) <= 0.01

    def test_single_worker_seeded_reproducibility(self):
        runs = []
        for _ in range(2):
            study = make_study(budget=80, seed=123)
            run_search(bowl, study)
            runs.append([(t.trial_id, t.params["x"], t.value, t.state) for t in study.trials])
        assert runs[0] == runs[1]

    def test_worker_count_does_not_change_budget(self):
        serial = make_study(budget=50, seed=9, worker_count=1)
        run_search(bowl, serial)
        parallel = make_study(budget=50, seed=9, worker_count=25)
        run_search(bowl, parallel)
        assert len(serial.trials) == len(parallel.trials) == 50
        assert len(parallel.completed()) == 50

    def test_failure_retried_once_then_recorded_failed(self):
        calls = {"n": 0}

        def flaky(params):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("first call explodes")
            return bowl(params)

        study = make_study(budget=5)
        run_search(flaky, study)
        assert len(study.completed()) == 5  # retry rescued the first slot

        def always_fails_on_x_below_half(params):
            if params["x"] < 0.5:
                raise RuntimeError("bad region")
            return bowl(params)

        study2 = make_study(budget=30, seed=2)
        run_search(always_fails_on_x_below_half, study2)
        failed = [t for t in study2.trials if t.state == "failed"]
        assert len(study2.trials) == 30
        assert all(t.value is None for t in failed)

    def test_all_failures_raise_search_failed(self):
        def broken(params):
            raise RuntimeError("nope")

        with pytest.raises(SearchFailedError):
            run_search(broken, make_study(budget=10))

    def test_exports(self, tmp_path):
        study = make_study(budget=12)
        run_search(bowl, study)
        csv_path = tmp_path / "trials.csv"
        json_path = tmp_path / "best.json"
        study.export_trials_csv(csv_path)
        study.export_best_json(json_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "trial_id,x,value,state"
        assert len(lines) == 13
        assert "best" in json_path.read_text()


class TestTpeBeatsRandom:
    def test_two_basin_median_comparison(self):
        def two_basin(params):
            x = params["x"]
            return 0.7 * np.exp(-(((x - 0.2) / 0.08) ** 2)) + 1.0 * np.exp(
                -(((x - 0.75) / 0.05) ** 2)
            )

        tpe_best, random_best = [], []
        for seed in range(10):
            study = make_study(budget=150, seed=seed)
            best, _ = run_search(two_basin, study)
            tpe_best.append(best.value)
            rng = np.random.default_rng(seed)
            random_best.append(
                max(two_basin({"x": float(rng.uniform(0, 1))}) for _ in range(150))
            )
        assert float(np.median(tpe_best)) >= float(np.median(random_best))
