"""Hyperparameter search: search-space files, grid and random search, budgeted trial runs.

A search-space file maps flag names to domains, one per line, with an
indented ``base:`` section of flags shared by every trial::

    # comments start with '#'
    method_learning_rate: grid[1e-2, 1e-3]
    model_hidden_dim: categorical[8, 16]
    method_adam_beta1: uniform(0.8, 0.95)
    method_regularizer_weight: loguniform(1e-6, 1e-3)
    base:
      datamodule: synthetic_classification
      trainer_epochs: 3
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import re
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence, Union

import numpy as np

from mlenv.config import TUNERS, RunConfig
from mlenv.methods import SPLITS, MetricRecord, metric_direction
from mlenv.registry import REGISTRY, Registry
from mlenv.runs import CONFIG_FILE, make_run_dir

logger = logging.getLogger(__name__)

LEADERBOARD_FILE = "leaderboard.csv"
SEARCH_SPACE_FILE = "search_space.txt"
TRIALS_FILE = "trials.json"

COMPLETED, OUT_OF_BUDGET, FAILED = "completed", "out_of_budget", "failed"

__all__ = [
    "Categorical", "Grid", "Uniform", "LogUniform", "SearchSpace", "SearchSpaceError", "TuningError",
    "TrialResult", "TuningResult", "parse_search_space", "parse_search_space_text", "serialize_search_space",
    "grid_enumerate", "random_sample", "run_tuning", "cmd_tune", "metric_direction",
]


class SearchSpaceError(ValueError):
    pass


class TuningError(RuntimeError):
    pass


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return json.dumps(value)


def _nonempty(values, kind: str) -> tuple:
    values = tuple(values)
    if not values:
        raise SearchSpaceError(f"{kind} list must be non-empty")
    return values


@dataclass(frozen=True)
class Categorical:
    values: tuple

    discrete = True

    def __post_init__(self):
        object.__setattr__(self, "values", _nonempty(self.values, "categorical"))

    def sample(self, rng: np.random.Generator):
        return self.values[int(rng.integers(len(self.values)))]

    def to_text(self) -> str:
        return f"categorical[{', '.join(_fmt(v) for v in self.values)}]"


@dataclass(frozen=True)
class Grid(Categorical):
    def __post_init__(self):
        super().__post_init__()
        for v in self.values:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SearchSpaceError(f"grid points must be numeric, got {v!r}")

    def to_text(self) -> str:
        return f"grid[{', '.join(_fmt(v) for v in self.values)}]"


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    discrete = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise SearchSpaceError(f"invalid range: need lo < hi, got ({self.lo}, {self.hi})")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi))

    def to_text(self) -> str:
        return f"uniform({self.lo!r}, {self.hi!r})"


@dataclass(frozen=True)
class LogUniform(Uniform):
    def __post_init__(self):
        super().__post_init__()
        if self.lo <= 0:
            raise SearchSpaceError(f"invalid range: loguniform needs lo > 0, got {self.lo}")

    def sample(self, rng: np.random.Generator) -> float:
        # clipped because exp(log(x)) can land one ulp outside the interval
        return float(min(max(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))), self.lo), self.hi))

    def to_text(self) -> str:
        return f"loguniform({self.lo!r}, {self.hi!r})"


Domain = Union[Categorical, Grid, Uniform, LogUniform]


@dataclass
class SearchSpace:
    entries: dict[str, Domain]
    base_args: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise SearchSpaceError("search space is empty: define at least one searched flag")

    @property
    def flags(self) -> list[str]:
        return sorted(self.entries)


_ENTRY = re.compile(r"^(?P<key>--?[A-Za-z_][\w]*|[A-Za-z_]\w*)\s*:\s*(?P<value>.*)$")
_LIST_DOMAIN = re.compile(r"^(?P<kind>\w+)\s*\[(?P<body>.*)\]$")
_RANGE_DOMAIN = re.compile(r"^(?P<kind>\w+)\s*\((?P<body>.*)\)$")


def _scalar(text: str):
    text = text.strip()
    if not text:
        raise SearchSpaceError("empty value")
    if text[0] in "\"'":
        if len(text) < 2 or text[-1] != text[0]:
            raise SearchSpaceError(f"unterminated string {text}")
        return text[1:-1]
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _split_items(body: str) -> list[str]:
    items, buf, quote = [], "", None
    for ch in body:
        if quote:
            buf += ch
            quote = None if ch == quote else quote
        elif ch in "\"'":
            buf += ch
            quote = ch
        elif ch == ",":
            items.append(buf)
            buf = ""
        else:
            buf += ch
    if quote:
        raise SearchSpaceError("unterminated string")
    if buf.strip() or items:
        items.append(buf)
    return items


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            quote = None if ch == quote else quote
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i].rstrip()
    return line.rstrip()


def _domain(text: str) -> Domain:
    m = _LIST_DOMAIN.match(text)
    if m:
        values = [_scalar(v) for v in _split_items(m["body"])]
        kinds = {"grid": Grid, "categorical": Categorical}
        if m["kind"] not in kinds:
            raise SearchSpaceError(f"unknown domain kind {m['kind']!r}; expected grid[...] or categorical[...]")
        return kinds[m["kind"]](tuple(values))
    m = _RANGE_DOMAIN.match(text)
    if m:
        kinds = {"uniform": Uniform, "loguniform": LogUniform}
        if m["kind"] not in kinds:
            raise SearchSpaceError(f"unknown domain kind {m['kind']!r}; expected uniform(...) or loguniform(...)")
        bounds = [_scalar(v) for v in _split_items(m["body"])]
        if len(bounds) != 2 or not all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in bounds):
            raise SearchSpaceError(f"{m['kind']} takes two numbers (lo, hi), got ({m['body']})")
        return kinds[m["kind"]](float(bounds[0]), float(bounds[1]))
    raise SearchSpaceError(
        f"expected a domain grid[...], categorical[...], uniform(lo, hi) or loguniform(lo, hi), got {text!r}"
        " (fixed values belong in the base: section)"
    )


def parse_search_space_text(text: str, source: str = "<string>") -> SearchSpace:
    entries: dict[str, Domain] = {}
    base: dict[str, Any] = {}
    in_base = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        indented = line[0] in " \t"
        try:
            m = _ENTRY.match(line.strip())
            if not m:
                raise SearchSpaceError("expected '<flag>: <value>'")
            key, value = m["key"].lstrip("-"), m["value"].strip()
            if not indented:
                in_base = key == "base" and not value
                if in_base:
                    continue
                if key in entries:
                    raise SearchSpaceError(f"duplicate flag {key!r}")
                entries[key] = _domain(value)
            elif in_base:
                if key in base:
                    raise SearchSpaceError(f"duplicate base flag {key!r}")
                base[key] = _scalar(value)
            else:
                raise SearchSpaceError("indented line outside a base: section")
        except SearchSpaceError as exc:
            raise SearchSpaceError(f"{source}:{lineno}: {exc}: {raw.strip()!r}") from None
    overlap = sorted(set(entries) & set(base))
    if overlap:
        raise SearchSpaceError(f"{source}: flags both searched and fixed in base: {overlap}")
    try:
        return SearchSpace(entries, base)
    except SearchSpaceError as exc:
        raise SearchSpaceError(f"{source}: {exc}") from None


def parse_search_space(path) -> SearchSpace:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"search-space file not found: {path}")
    return parse_search_space_text(path.read_text(encoding="utf-8"), str(path))


def serialize_search_space(space: SearchSpace) -> str:
    lines = [f"{flag}: {space.entries[flag].to_text()}" for flag in space.flags]
    if space.base_args:
        lines.append("base:")
        lines += [f"  {k}: {_fmt(v)}" for k, v in sorted(space.base_args.items())]
    return "\n".join(lines) + "\n"


def grid_enumerate(space: SearchSpace) -> list[dict[str, Any]]:
    """Cartesian product over sorted flag names; the rightmost flag varies fastest."""
    for flag in space.flags:
        if not space.entries[flag].discrete:
            raise SearchSpaceError(
                f"grid search needs discrete domains, but {flag!r} is {space.entries[flag].to_text()}"
            )
    flags = space.flags
    return [dict(zip(flags, combo)) for combo in itertools.product(*(space.entries[f].values for f in flags))]


def random_sample(space: SearchSpace, n: int, seed: int) -> list[dict[str, Any]]:
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    return [{flag: space.entries[flag].sample(rng) for flag in space.flags} for _ in range(n)]


@dataclass
class TrialResult:
    trial_id: int
    assignment: dict[str, Any]
    status: str
    objective: float | None = None
    records: list[MetricRecord] = field(default_factory=list)
    run_dir: Path | None = None
    error: str | None = None

    def __post_init__(self):
        if (self.objective is not None) != (self.status == COMPLETED):
            raise ValueError(f"trial {self.trial_id}: objective must be set exactly when completed")

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "assignment": self.assignment,
            "status": self.status,
            "objective": self.objective,
            "run_dir": str(self.run_dir) if self.run_dir else None,
            "error": self.error,
            "records": [{"split": r.split, "epoch": r.epoch, "values": r.values} for r in self.records],
        }


@dataclass
class TuningResult:
    best: TrialResult
    trials: list[TrialResult]
    run_dir: Path
    direction: str

    @property
    def leaderboard_path(self) -> Path:
        return self.run_dir / LEADERBOARD_FILE


def train_trial(argv: list[str], registry: Registry = REGISTRY) -> tuple[list[MetricRecord], Path]:
    """Run one full training from a command line; returns its history and run directory."""
    from mlenv.config import parse_cli
    from mlenv.experiment import cmd_train

    result = cmd_train(parse_cli(argv, "train", registry), registry)
    return result.state.history, result.run_dir


def objective_of(records: Sequence[MetricRecord], metric: str) -> float | None:
    split = metric.split("_", 1)[0]
    last = [r for r in records if r.split == split and metric in r.values]
    if not last:
        return None
    return float(max(last, key=lambda r: r.epoch).values[metric])


def write_leaderboard(path: Path, trials: Sequence[TrialResult], flags: Sequence[str]) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["trial_id", "status", "objective", *flags])
        for t in sorted(trials, key=lambda t: t.trial_id):
            obj = "" if t.objective is None else repr(t.objective)
            w.writerow([t.trial_id, t.status, obj, *(t.assignment.get(k, "") for k in flags)])
    tmp.replace(path)


def _check_metric(metric: str, mode: str | None) -> str:
    split, _, name = metric.partition("_")
    if split not in SPLITS or not name:
        raise ValueError(f"optimization metric {metric!r} must look like <split>_<metric> with split in {SPLITS}")
    return metric_direction(metric, mode)


def run_tuning(
    space: SearchSpace,
    optimizer: str,
    optimization_metric: str = "validation_nll",
    max_wallclock_time: float = 3600.0,
    save_path="./experiments/hpo",
    *,
    seed: int = 0,
    num_samples: int = 10,
    workers: int = 1,
    optimization_mode: str | None = None,
    clock: Callable[[], float] = time.monotonic,
    trial_fn: Callable[[list[str]], tuple] | None = None,
    run_dir: Path | None = None,
) -> TuningResult:
    """Launch trials in order until the list is exhausted or the budget has elapsed.

    The budget gates launches only: a trial that starts under budget runs to
    completion. Trial ``i`` trains with seed ``seed + i``.
    """
    if optimizer not in TUNERS:
        raise ValueError(f"unknown optimizer {optimizer!r}; expected one of {', '.join(TUNERS)}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    direction = _check_metric(optimization_metric, optimization_mode)
    if optimizer == "Grid Search":
        assignments = grid_enumerate(space)
    else:
        assignments = random_sample(space, num_samples, seed)
    trial_fn = trial_fn or train_trial
    run_dir = Path(run_dir) if run_dir is not None else make_run_dir(save_path, "tune")
    (run_dir / SEARCH_SPACE_FILE).write_text(serialize_search_space(space))
    trials_dir = run_dir / "trials"
    flags = space.flags

    def run_one(i: int) -> TrialResult:
        assignment = assignments[i]
        args = {**space.base_args, **assignment, "seed": seed + i, "save_path": str(trials_dir / f"trial_{i:03d}")}
        argv = RunConfig("train", args).to_argv()
        logger.info("trial %d: %s", i, assignment)
        try:
            records, trial_dir = trial_fn(argv)
        except Exception as exc:
            logger.warning("trial %d failed: %s", i, exc)
            return TrialResult(i, assignment, FAILED, error=f"{type(exc).__name__}: {exc}")
        obj = objective_of(records, optimization_metric)
        if obj is None:
            return TrialResult(i, assignment, FAILED, None, list(records), trial_dir,
                               f"metric {optimization_metric!r} not reported")
        return TrialResult(i, assignment, COMPLETED, obj, list(records), trial_dir)

    results: dict[int, TrialResult] = {}
    start = clock()
    next_i = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = {}
        while next_i < len(assignments) or pending:
            while next_i < len(assignments) and len(pending) < workers:
                if clock() - start > max_wallclock_time:
                    for j in range(next_i, len(assignments)):
                        results[j] = TrialResult(j, assignments[j], OUT_OF_BUDGET)
                    logger.info("budget of %ss spent; %d trials not launched", max_wallclock_time,
                                len(assignments) - next_i)
                    next_i = len(assignments)
                    break
                pending[pool.submit(run_one, next_i)] = next_i
                next_i += 1
            if not pending:
                break
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                i = pending.pop(fut)
                results[i] = fut.result()
                # only this thread writes the leaderboard
                write_leaderboard(run_dir / LEADERBOARD_FILE, list(results.values()), flags)

    trials = [results[i] for i in sorted(results)]
    write_leaderboard(run_dir / LEADERBOARD_FILE, trials, flags)
    (run_dir / TRIALS_FILE).write_text(json.dumps([t.to_dict() for t in trials], indent=2, sort_keys=True) + "\n")
    completed = [t for t in trials if t.status == COMPLETED]
    if not completed:
        errors = sorted({t.error for t in trials if t.error})
        raise TuningError(
            f"metric {optimization_metric!r} was never reported by any trial"
            + (f"; trial errors: {errors}" if errors else "")
        )
    sign = 1.0 if direction == "minimize" else -1.0
    best = min(completed, key=lambda t: (sign * t.objective, t.trial_id))
    logger.info("best trial %d: %s = %r %s", best.trial_id, optimization_metric, best.objective, best.assignment)
    return TuningResult(best, trials, run_dir, direction)


def cmd_tune(cfg: RunConfig, trial_fn=None, clock: Callable[[], float] = time.monotonic) -> TuningResult:
    if cfg.command != "tune":
        raise ValueError(f"cmd_tune needs a tune config, got {cfg.command!r}")
    a = cfg.args
    space = parse_search_space(a["config_file"])
    if a["optimizer"] == "Grid Search":
        grid_enumerate(space)  # reject continuous domains before creating anything
    _check_metric(a["optimization_metric"], a["optimization_mode"])
    run_dir = make_run_dir(a["save_path"], "tune")
    (run_dir / CONFIG_FILE).write_text(cfg.to_json(), encoding="utf-8")
    return run_tuning(
        space,
        a["optimizer"],
        a["optimization_metric"],
        a["max_wallclock_time"],
        seed=cfg.seed,
        num_samples=a["num_samples"],
        workers=a["workers"],
        optimization_mode=a["optimization_mode"],
        clock=clock,
        trial_fn=trial_fn,
        run_dir=run_dir,
    )
