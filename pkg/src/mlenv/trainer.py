"""Training and evaluation loops, plus checkpoint persistence."""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from mlenv.methods import MetricAccumulator, MetricRecord, OptimizerState, metric_direction
from mlenv.transforms import EvalTransformConfig, apply_eval_transforms

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint"
CHECKPOINT_VERSION = 1


class StepError(RuntimeError):
    """A training step failed; the message carries the epoch and batch index."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainerConfig:
    epochs: int = 3
    devices: list[int] = field(default_factory=lambda: [0])
    seed: int = 0
    save_path: str = "./experiments"
    optimization_metric: str = "validation_nll"
    optimization_mode: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if len(self.devices) != 1:
            raise ValueError(f"exactly one device is supported, got {self.devices}")


@dataclass
class RunState:
    epoch: int = 0
    history: list[MetricRecord] = field(default_factory=list)
    best_value: float | None = None

    def records(self, split: str) -> list[MetricRecord]:
        return [r for r in self.history if r.split == split]

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "best_value": self.best_value,
            "history": [{"split": r.split, "epoch": r.epoch, "values": r.values} for r in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunState":
        history = [MetricRecord(h["split"], h["epoch"], h["values"]) for h in d["history"]]
        return cls(d["epoch"], history, d["best_value"])


class Callback(Protocol):
    def on_epoch_end(self, record: MetricRecord) -> None: ...

    def on_fit_end(self, state: RunState) -> None: ...


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _evaluate_split(method, model, dm, split: str) -> dict[str, float]:
    acc = MetricAccumulator()
    step = method.validation_step if split == "validation" else method.test_step
    for batch in dm.eval_batches(split):
        step(model, batch, acc)
    return acc.compute(split)


def fit(cfg: TrainerConfig, method, model, dm, callbacks: Sequence[Callback] = ()) -> RunState:
    """Run ``cfg.epochs`` epochs of training, each followed by a validation pass."""
    state = RunState()
    if dm.train is None:
        raise RuntimeError("datamodule must be prepared and split before fit()")
    method.configure_model(model, dm)
    if method.optimizer_state is None:
        method.configure_optimizer(model)
    direction = None
    for epoch in range(1, cfg.epochs + 1):
        acc = MetricAccumulator()
        for i, batch in enumerate(dm.train_batches(epoch_seed(cfg.seed, epoch))):
            try:
                method.training_step(model, batch, acc)
            except Exception as exc:
                raise StepError(f"epoch {epoch}, batch {i}: {exc}") from exc
        records = [MetricRecord("train", epoch, acc.compute("train"))]
        if len(dm.validation):
            values = _evaluate_split(method, method.eval_model(model), dm, "validation")
            records.append(MetricRecord("validation", epoch, values))
            value = values.get(cfg.optimization_metric)
            if value is not None:
                direction = direction or metric_direction(cfg.optimization_metric, cfg.optimization_mode)
                best = state.best_value
                if best is None or (value < best if direction == "minimize" else value > best):
                    state.best_value = value
        state.epoch = epoch
        for record in records:
            state.history.append(record)
            logger.info("epoch %d %s %s", epoch, record.split, record.values)
            for cb in callbacks:
                cb.on_epoch_end(record)
    for cb in callbacks:
        cb.on_fit_end(state)
    return state


def evaluate(
    cfg: TrainerConfig, method, model, dm, transforms: EvalTransformConfig | None = None, epoch: int = 0
) -> MetricRecord:
    """Test-split metrics, computed on a transformed copy when transforms are configured."""
    if dm.test is None or len(dm.test) == 0:
        raise ValueError(f"{dm.name}: test set is empty")
    if transforms is not None:
        eval_model = model if transforms.empty else apply_eval_transforms(model, transforms)
    else:
        eval_model = method.eval_model(model)
    return MetricRecord("test", epoch, _evaluate_split(method, eval_model, dm, "test"))


class Checkpoint(NamedTuple):
    params: dict[str, np.ndarray]
    optimizer_state: OptimizerState | None
    run_state: RunState


def save_checkpoint(model, optimizer_state: OptimizerState | None, run_state: RunState, path) -> None:
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "param_names": np.array([n for n, _ in model.named_parameters()]),
        "run_state": np.array(json.dumps(run_state.to_dict(), sort_keys=True)),
    }
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    if optimizer_state is not None:
        arrays["optim/kind"] = np.array(optimizer_state.kind)
        arrays["optim/t"] = np.array(optimizer_state.t)
        for i, (m, v) in enumerate(zip(optimizer_state.m, optimizer_state.v)):
            arrays[f"optim/m/{i}"] = m
            arrays[f"optim/v/{i}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, model=None) -> Checkpoint:
    """Read a checkpoint; when ``model`` is given, validate shapes and copy the weights in."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            files = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    try:
        version = int(files["format_version"])
        names = [str(n) for n in files["param_names"]]
        params = {n: files[f"param/{n}"] for n in names}
        run_state = RunState.from_dict(json.loads(str(files["run_state"])))
    except KeyError as exc:
        raise CheckpointError(f"{path}: checkpoint is missing entry {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    optimizer_state = None
    if "optim/kind" in files:
        kind = str(files["optim/kind"])
        n = sum(1 for k in files if k.startswith("optim/m/"))
        optimizer_state = OptimizerState(
            kind,
            int(files["optim/t"]),
            [files[f"optim/m/{i}"] for i in range(n)],
            [files[f"optim/v/{i}"] for i in range(n)],
        )
    if model is not None:
        _assign(model, params, path)
    return Checkpoint(params, optimizer_state, run_state)


def _assign(model, params: dict[str, np.ndarray], path: Path) -> None:
    expected = model.named_parameters()
    for name, p in expected:
        if name not in params:
            raise CheckpointError(f"{path}: checkpoint has no parameter {name}")
        if params[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {params[name].shape}, model {p.shape}"
            )
    extra = set(params) - {n for n, _ in expected}
    if extra:
        raise CheckpointError(f"{path}: checkpoint has parameters the model lacks: {sorted(extra)}")
    for name, p in expected:
        p.data = np.array(params[name], dtype=np.float64)
