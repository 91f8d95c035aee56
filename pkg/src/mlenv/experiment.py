"""The train, test and replay pipelines behind the command-line entry points.

Registered components are built from a `RunConfig` by keyword: a datamodule
factory receives ``seed`` plus its ``datamodule_*`` flags (prefix stripped), a
model factory receives ``input_dim``, ``output_dim``, ``seed`` and its
``model_*`` flags, and a method factory receives ``task``, ``loss``,
``regularizer`` and its ``method_*`` flags.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from mlenv.config import RunConfig, parse_cli
from mlenv.methods import MetricRecord
from mlenv.registry import REGISTRY, Registry
from mlenv.runs import (
    CONFIG_FILE,
    PLOT_FILE,
    make_run_dir,
    plot_history,
    run_log,
    write_run_artifacts,
    write_test_metrics,
)
from mlenv.trainer import CHECKPOINT_NAME, RunState, TrainerConfig, evaluate, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class Components:
    datamodule: object
    model: object
    method: object
    trainer: TrainerConfig


@dataclass
class TrainResult:
    run_dir: Path
    config: RunConfig
    state: RunState
    test: MetricRecord


@dataclass
class TestResult:
    run_dir: Path
    config: RunConfig
    test: MetricRecord


def build_components(cfg: RunConfig, registry: Registry = REGISTRY) -> Components:
    """Instantiate and prepare everything a run needs, without touching the save path."""
    a = cfg.args
    with stage("configure trainer"):
        trainer = TrainerConfig(
            epochs=a["trainer_epochs"], devices=a["trainer_devices"], seed=cfg.seed, save_path=a["save_path"]
        )
    with stage("prepare data"):
        dm = registry.resolve("datamodule", a["datamodule"])(seed=cfg.seed, **cfg.group("datamodule"))
        dm.setup(a["data_root"])
    with stage("build model"):
        model = registry.resolve("model", a["model"])(
            input_dim=dm.input_dim, output_dim=dm.output_dim, seed=cfg.seed, **cfg.group("model")
        )
    with stage("build method"):
        method = registry.resolve("method", a["method"])(
            task=dm.task, loss=a["loss"], regularizer=a["regularizer"], **cfg.group("method")
        )
    if a.get("emit_plots"):
        with stage("check plotting backend"):
            import matplotlib  # noqa: F401
    return Components(dm, model, method, trainer)


def cmd_train(cfg: RunConfig, registry: Registry = REGISTRY) -> TrainResult:
    if cfg.command != "train":
        raise ValueError(f"cmd_train needs a train config, got {cfg.command!r}")
    c = build_components(cfg, registry)
    with stage("create run directory"):
        run_dir = make_run_dir(cfg.args["save_path"], "train")
    with run_log(run_dir):
        logger.info("run directory %s", run_dir)
        (run_dir / CONFIG_FILE).write_text(cfg.to_json(), encoding="utf-8")
        with stage("fit"):
            state = fit(c.trainer, c.method, c.model, c.datamodule)
        with stage("test"):
            test = evaluate(c.trainer, c.method, c.model, c.datamodule, epoch=state.epoch)
        logger.info("test %s", test.values)
        with stage("write artifacts"):
            write_run_artifacts(run_dir, cfg, state.history, ["loss", *c.method.metric_names])
            save_checkpoint(c.model, c.method.optimizer_state, state, run_dir / CHECKPOINT_NAME)
            write_test_metrics(run_dir, test)
            if cfg.args.get("emit_plots"):
                plot_history(state.history, run_dir / PLOT_FILE)
    return TrainResult(run_dir, cfg, state, test)


def cmd_test(cfg: RunConfig, registry: Registry = REGISTRY) -> TestResult:
    if cfg.command != "test":
        raise ValueError(f"cmd_test needs a test config, got {cfg.command!r}")
    c = build_components(cfg, registry)
    with stage("load checkpoint"):
        load_checkpoint(cfg.args["load_path"], c.model)
    with stage("test"):
        test = evaluate(c.trainer, c.method, c.model, c.datamodule)
    with stage("create run directory"):
        run_dir = make_run_dir(cfg.args["save_path"], "test")
    with run_log(run_dir):
        logger.info("evaluated %s: %s", cfg.args["load_path"], test.values)
        with stage("write artifacts"):
            (run_dir / CONFIG_FILE).write_text(cfg.to_json(), encoding="utf-8")
            write_test_metrics(run_dir, test)
    return TestResult(run_dir, cfg, test)


def replay(config_path, save_path=None, registry: Registry = REGISTRY) -> TrainResult:
    """Re-run a recorded train configuration; ``save_path`` overrides the recorded one."""
    path = Path(config_path)
    if path.is_dir():
        path = path / CONFIG_FILE
    recorded = RunConfig.from_json(path.read_text(encoding="utf-8"))
    if recorded.command != "train":
        raise ValueError(f"{path}: only train runs can be replayed, got {recorded.command!r}")
    if save_path is not None:
        recorded.args["save_path"] = str(save_path)
    cfg = parse_cli(recorded.to_argv(), "train", registry)
    return cmd_train(cfg, registry)
