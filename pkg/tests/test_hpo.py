import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlenv.config import parse_cli
from mlenv.hpo import (
    Categorical,
    Grid,
    LogUniform,
    SearchSpace,
    SearchSpaceError,
    TrialResult,
    TuningError,
    Uniform,
    cmd_tune,
    grid_enumerate,
    parse_search_space,
    parse_search_space_text,
    random_sample,
    run_tuning,
    serialize_search_space,
)
from mlenv.methods import MetricRecord

SPACE = """\
# learning rate and width
method_learning_rate: grid[1e-3, 1e-4]
model_hidden_dim: categorical[16, 32]
base:
  datamodule: synthetic_classification   # tiny
  trainer_epochs: 2
  datamodule_n_samples: 300
"""


def fake_trial(objectives):
    """Trial stub: validation_nll per epoch taken from ``objectives(argv)``."""
    calls = []

    def run(argv):
        calls.append(argv)
        values = objectives(dict(zip(argv[::2], argv[1::2])))
        return [MetricRecord("validation", e + 1, {"validation_nll": v}) for e, v in enumerate(values)], None

    run.calls = calls
    return run


class FakeClock:
    def __init__(self, step):
        self.t, self.step = 0.0, step

    def __call__(self):
        self.t += self.step
        return self.t


class TestParse:
    def test_two_entries(self):
        space = parse_search_space_text(SPACE)
        assert space.entries == {
            "method_learning_rate": Grid((1e-3, 1e-4)),
            "model_hidden_dim": Categorical((16, 32)),
        }
        assert space.base_args == {"datamodule": "synthetic_classification", "trainer_epochs": 2,
                                   "datamodule_n_samples": 300}

    def test_from_file(self, tmp_path):
        path = tmp_path / "space.txt"
        path.write_text(SPACE)
        assert parse_search_space(path) == parse_search_space_text(SPACE)
        with pytest.raises(FileNotFoundError):
            parse_search_space(tmp_path / "missing.txt")

    def test_continuous(self):
        space = parse_search_space_text("a: uniform(0.1, 0.2)\nb: loguniform(1e-5, 1e-1)\n--c: grid[1]")
        assert space.entries["a"] == Uniform(0.1, 0.2) and space.entries["b"] == LogUniform(1e-5, 1e-1)
        assert "c" in space.entries

    @pytest.mark.parametrize(
        "text, match",
        [
            ("a: uniform(0.2, 0.1)", "invalid range"),
            ("a: loguniform(0, 1)", "lo > 0"),
            ("a: normal(0, 1)", "unknown domain kind"),
            ("a: grid[]", "non-empty"),
            ("a: grid[x, 2]", "numeric"),
            ("a: 3", "base"),
            ("a grid[1]", "expected"),
            ("a: grid[1]\na: grid[2]", "duplicate"),
            ("  a: 1", "outside a base"),
            ("a: uniform(1)", "two numbers"),
            ("a: grid[1]\nbase:\n  a: 2", "both searched and fixed"),
        ],
    )
    def test_errors(self, text, match):
        with pytest.raises(SearchSpaceError, match=match):
            parse_search_space_text(text)

    def test_error_has_line_context(self):
        with pytest.raises(SearchSpaceError, match=r"space.txt:3: .*'b: uniform\(2, 1\)'"):
            parse_search_space_text("# c\na: grid[1]\nb: uniform(2, 1)", "space.txt")

    def test_empty(self):
        with pytest.raises(SearchSpaceError, match="empty"):
            parse_search_space_text("# nothing\nbase:\n  trainer_epochs: 1\n")

    def test_quoted_values(self):
        space = parse_search_space_text("model_activation: categorical['relu', \"tanh\", 'a,b#c']")
        assert space.entries["model_activation"].values == ("relu", "tanh", "a,b#c")

    def test_round_trip_example(self):
        space = parse_search_space_text(SPACE)
        assert parse_search_space_text(serialize_search_space(space)) == space

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_round_trip_property(self, data):
        names = data.draw(st.lists(st.from_regex(r"[a-z][a-z_]{0,8}", fullmatch=True), min_size=1, max_size=4,
                                   unique=True))
        scalars = st.one_of(st.integers(-1000, 1000), st.floats(-1e6, 1e6, allow_nan=False),
                            st.from_regex(r"[a-z][a-z0-9 ]{0,6}", fullmatch=True).map(str.strip))
        entries = {}
        for name in names:
            kind = data.draw(st.sampled_from(["grid", "categorical", "uniform", "loguniform"]))
            if kind in ("grid", "categorical"):
                elem = st.one_of(st.integers(-100, 100), st.floats(-1e3, 1e3, allow_nan=False))
                values = tuple(data.draw(st.lists(elem if kind == "grid" else scalars, min_size=1, max_size=4)))
                entries[name] = (Grid if kind == "grid" else Categorical)(values)
            else:
                lo = data.draw(st.floats(1e-6, 1e3))
                entries[name] = (Uniform if kind == "uniform" else LogUniform)(lo, lo * 2 + 1)
        base = data.draw(st.dictionaries(st.from_regex(r"x_[a-z]{1,5}", fullmatch=True), scalars, max_size=3))
        space = SearchSpace(entries, base)
        assert parse_search_space_text(serialize_search_space(space)) == space


class TestEnumerate:
    def test_two_by_two(self):
        out = grid_enumerate(parse_search_space_text(SPACE))
        assert out == [
            {"method_learning_rate": 1e-3, "model_hidden_dim": 16},
            {"method_learning_rate": 1e-3, "model_hidden_dim": 32},
            {"method_learning_rate": 1e-4, "model_hidden_dim": 16},
            {"method_learning_rate": 1e-4, "model_hidden_dim": 32},
        ]

    def test_single_entry_in_listed_order(self):
        assert grid_enumerate(SearchSpace({"a": Grid((3, 1, 2))})) == [{"a": 3}, {"a": 1}, {"a": 2}]

    def test_sizes_multiply(self):
        space = SearchSpace({"z": Grid((1, 2)), "a": Grid((1, 2, 3)), "m": Categorical(tuple("wxyz"))})
        out = grid_enumerate(space)
        assert len(out) == 24 and len({tuple(sorted(d.items())) for d in out}) == 24
        assert list(out[0]) == ["a", "m", "z"]

    def test_continuous_rejected_by_name(self):
        with pytest.raises(SearchSpaceError, match="method_learning_rate"):
            grid_enumerate(SearchSpace({"method_learning_rate": LogUniform(1e-4, 1e-2), "b": Grid((1,))}))


class TestRandom:
    def test_deterministic(self):
        space = SearchSpace({"a": Uniform(0, 1), "b": Categorical(("x", "y")), "c": LogUniform(1e-5, 1e-1)})
        assert random_sample(space, 20, 7) == random_sample(space, 20, 7)
        assert random_sample(space, 20, 7) != random_sample(space, 20, 8)

    def test_loguniform_range(self):
        draws = [d["c"] for d in random_sample(SearchSpace({"c": LogUniform(1e-5, 1e-1)}), 2000, 0)]
        assert min(draws) >= 1e-5 and max(draws) <= 1e-1

    def test_loguniform_log_measure(self):
        draws = np.array([d["c"] for d in random_sample(SearchSpace({"c": LogUniform(1e-4, 1.0)}), 10_000, 0)])
        # 1e-2 is the log-midpoint of [1e-4, 1]
        assert abs((draws < 1e-2).mean() - 0.5) <= 0.03

    def test_uniform_and_categorical_cover(self):
        draws = random_sample(SearchSpace({"a": Uniform(2, 3), "b": Categorical((1, 2, 3))}), 500, 1)
        assert all(2 <= d["a"] <= 3 for d in draws) and {d["b"] for d in draws} == {1, 2, 3}

    def test_needs_one(self):
        with pytest.raises(ValueError):
            random_sample(SearchSpace({"a": Uniform(0, 1)}), 0, 0)


class TestTrialResult:
    def test_objective_iff_completed(self):
        with pytest.raises(ValueError):
            TrialResult(0, {}, "completed")
        with pytest.raises(ValueError):
            TrialResult(0, {}, "failed", 0.3)


def leaderboard(result):
    with open(result.leaderboard_path, newline="") as f:
        return list(csv.DictReader(f))


class TestRunTuning:
    def space(self):
        return SearchSpace({"lr": Grid((0.1, 0.2)), "width": Grid((1, 2))}, {"datamodule": "x"})

    def test_grid_completes_and_picks_minimum(self, tmp_path):
        trial = fake_trial(lambda a: [1.0, float(a["--lr"]) * int(a["--width"])])
        result = run_tuning(self.space(), "Grid Search", "validation_nll", 420, tmp_path, trial_fn=trial)
        rows = leaderboard(result)
        assert [r["status"] for r in rows] == ["completed"] * 4
        assert list(rows[0]) == ["trial_id", "status", "objective", "lr", "width"]
        assert result.best.objective == min(float(r["objective"]) for r in rows) == 0.1
        assert result.best.assignment == {"lr": 0.1, "width": 1}

    def test_objective_is_last_epoch(self, tmp_path):
        trial = fake_trial(lambda a: [0.01, 5.0])
        result = run_tuning(self.space(), "Grid Search", "validation_nll", 420, tmp_path, trial_fn=trial)
        assert result.best.objective == 5.0

    def test_maximize(self, tmp_path):
        def trial(argv):
            a = dict(zip(argv[::2], argv[1::2]))
            return [MetricRecord("validation", 1, {"validation_accuracy": float(a["--lr"])})], None

        result = run_tuning(self.space(), "Grid Search", "validation_accuracy", 420, tmp_path, trial_fn=trial)
        assert result.best.objective == 0.2 and result.best.trial_id == 2

    def test_two_trials_winner(self, tmp_path):
        space = SearchSpace({"lr": Grid((0.5, 0.3))})
        result = run_tuning(space, "Grid Search", "validation_nll", 420, tmp_path,
                            trial_fn=fake_trial(lambda a: [float(a["--lr"])]))
        assert result.best.objective == 0.3

    def test_per_trial_seed_and_dirs(self, tmp_path):
        trial = fake_trial(lambda a: [1.0])
        run_tuning(self.space(), "Grid Search", "validation_nll", 420, tmp_path, seed=10, trial_fn=trial)
        argvs = [dict(zip(c[::2], c[1::2])) for c in trial.calls]
        assert [a["--seed"] for a in argvs] == ["10", "11", "12", "13"]
        assert len({a["--save_path"] for a in argvs}) == 4
        assert all(a["--datamodule"] == "x" for a in argvs)

    def test_budget_is_launch_gate(self, tmp_path):
        # each clock read advances 1 s: trial i is launched at elapsed i+1
        trial = fake_trial(lambda a: [1.0])
        result = run_tuning(self.space(), "Grid Search", "validation_nll", 2.5, tmp_path,
                            clock=FakeClock(1.0), trial_fn=trial)
        assert [t.status for t in result.trials] == ["completed", "completed", "out_of_budget", "out_of_budget"]
        assert [r["objective"] for r in leaderboard(result)][2:] == ["", ""]

    def test_budget_monotone_prefix(self, tmp_path):
        launched = []
        for budget in (1.5, 2.5, 3.5, 10):
            trial = fake_trial(lambda a: [1.0])
            run_tuning(self.space(), "Grid Search", "validation_nll", budget, tmp_path,
                       clock=FakeClock(1.0), trial_fn=trial)
            launched.append([[a for a in c if "trials" not in a] for c in trial.calls])
        for short, long in itertools.pairwise(launched):
            assert long[: len(short)] == short
        assert [len(c) for c in launched] == [1, 2, 3, 4]

    def test_failed_trial_recorded(self, tmp_path):
        def trial(argv):
            if "0.1" in argv:
                raise RuntimeError("diverged")
            return [MetricRecord("validation", 1, {"validation_nll": 0.7})], None

        result = run_tuning(self.space(), "Grid Search", "validation_nll", 420, tmp_path, trial_fn=trial)
        assert [t.status for t in result.trials] == ["failed", "failed", "completed", "completed"]
        assert "diverged" in result.trials[0].error

    def test_metric_never_reported(self, tmp_path):
        trial = fake_trial(lambda a: [1.0])
        with pytest.raises(TuningError, match="validation_mse"):
            run_tuning(self.space(), "Grid Search", "validation_mse", 420, tmp_path, trial_fn=trial)

    def test_bad_names(self, tmp_path):
        with pytest.raises(ValueError, match="optimizer"):
            run_tuning(self.space(), "Hyperband", "validation_nll", 420, tmp_path)
        with pytest.raises(ValueError, match="<split>_<metric>"):
            run_tuning(self.space(), "Grid Search", "nll", 420, tmp_path)
        with pytest.raises(ValueError, match="--optimization_mode"):
            run_tuning(self.space(), "Grid Search", "validation_custom", 420, tmp_path)

    def test_workers_same_results(self, tmp_path):
        space = SearchSpace({"lr": Grid((0.1, 0.2, 0.3)), "width": Grid((1, 2, 3))})
        objective = lambda a: [float(a["--lr"]) + int(a["--width"]) + int(a["--seed"])]  # noqa: E731
        serial = run_tuning(space, "Grid Search", "validation_nll", 420, tmp_path / "a", trial_fn=fake_trial(objective))
        parallel = run_tuning(space, "Grid Search", "validation_nll", 420, tmp_path / "b", workers=4,
                              trial_fn=fake_trial(objective))
        assert [t.objective for t in serial.trials] == [t.objective for t in parallel.trials]
        assert leaderboard(serial) == leaderboard(parallel)

    def test_random_search(self, tmp_path):
        space = SearchSpace({"lr": LogUniform(1e-4, 1e-1)})
        trial = fake_trial(lambda a: [math.log(float(a["--lr"]))])
        result = run_tuning(space, "Random Search", "validation_nll", 420, tmp_path, num_samples=5, trial_fn=trial)
        assert len(result.trials) == 5
        assert result.best.objective == min(t.objective for t in result.trials)


class TestEndToEnd:
    def test_real_trials(self, tmp_path):
        path = tmp_path / "space.txt"
        path.write_text(SPACE)
        cfg = parse_cli(["tune", "--config_file", str(path), "--optimizer", "Grid Search",
                         "--save_path", str(tmp_path / "hpo"), "--max_wallclock_time", "420",
                         "--optimization_metric", "validation_nll"])
        result = cmd_tune(cfg)
        rows = leaderboard(result)
        assert len(rows) == 4 and all(r["status"] == "completed" for r in rows)
        for t in result.trials:
            assert (t.run_dir / "metrics.csv").exists()
        assert (result.run_dir / "config.json").exists()

    def test_grid_with_uniform_fails_before_writing(self, tmp_path):
        path = tmp_path / "space.txt"
        path.write_text("method_learning_rate: uniform(1e-4, 1e-2)\n")
        cfg = parse_cli(["tune", "--config_file", str(path), "--optimizer", "Grid Search",
                         "--save_path", str(tmp_path / "hpo")])
        with pytest.raises(SearchSpaceError, match="method_learning_rate"):
            cmd_tune(cfg)
        assert not (tmp_path / "hpo").exists()

    def test_bad_base_flag_fails_trials(self, tmp_path):
        path = tmp_path / "space.txt"
        path.write_text("model_hidden_dim: grid[4]\nbase:\n  datamodule: synthetic_classification\n  bogus: 1\n")
        cfg = parse_cli(["tune", "--config_file", str(path), "--optimizer", "Grid Search",
                         "--save_path", str(tmp_path / "hpo")])
        with pytest.raises(TuningError, match="bogus"):
            cmd_tune(cfg)
