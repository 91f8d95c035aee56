"""Training recipes: loss, optimiser, regulariser, step logic and metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mlenv.data.datasets import Batch, TaskKind
from mlenv.engine import (
    ShapeError,
    Tape,
    Tensor,
    abs_,
    add,
    backward,
    log_softmax,
    mean,
    mul,
    no_grad,
    pick,
    sub,
    sum_,
    zero_grad,
)
from mlenv.transforms import EvalTransformConfig, apply_eval_transforms

logger = logging.getLogger(__name__)

LOSSES = ("crossentropy", "mse")
OPTIMIZERS = ("sgd", "adam")
SPLITS = ("train", "validation", "test")


@dataclass
class MethodConfig:
    method_name: str = "base"
    loss: str = "crossentropy"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    regularizer: str = "none"
    regularizer_weight: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not self.regularizer_weight >= 0:
            raise ValueError(f"regularizer_weight must be >= 0, got {self.regularizer_weight}")


def compute_loss(kind: str, predictions: Tensor, targets: Tensor) -> Tensor:
    """Mean cross-entropy of logits against class indices, or mean squared error."""
    if kind == "crossentropy":
        if predictions.ndim != 2 or targets.shape != (predictions.shape[0],):
            raise ShapeError(f"crossentropy needs [B, K] logits and [B] targets, got {predictions.shape} and {targets.shape}")
        idx = targets.data.astype(np.int64)
        if not np.array_equal(idx, targets.data):
            raise ValueError("crossentropy targets must be integral class indices")
        k = predictions.shape[1]
        if idx.size and (idx.min() < 0 or idx.max() >= k):
            raise ValueError(f"class index out of range [0, {k}): min {idx.min()}, max {idx.max()}")
        return mul(mean(pick(log_softmax(predictions), idx)), -1.0)
    if kind == "mse":
        if predictions.shape != targets.shape:
            raise ShapeError(f"mse needs equal shapes, got {predictions.shape} and {targets.shape}")
        diff = sub(predictions, targets)
        return mean(mul(diff, diff))
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def _l1(params: list[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for p in params:
        total = add(total, sum_(abs_(p)))
    return total


def _l2(params: list[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for p in params:
        total = add(total, sum_(mul(p, p)))
    return total


REGULARIZERS = {
    "none": None,
    "l1": _l1,
    "l2": _l2,
}


def regularizer_penalty(kind: str, params: list[Tensor], weight: float) -> Tensor:
    """``weight * sum|w|`` (l1), ``weight * sum w^2`` (l2) or 0 (none), over all params."""
    if kind not in REGULARIZERS:
        raise ValueError(f"unknown regularizer {kind!r}; expected one of {sorted(REGULARIZERS)}")
    if weight < 0:
        raise ValueError(f"regularizer weight must be >= 0, got {weight}")
    fn = REGULARIZERS[kind]
    if fn is None:
        return Tensor(0.0)
    return mul(fn(params), float(weight))


@dataclass
class OptimizerState:
    kind: str
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, kind: str, params: list[Tensor]) -> "OptimizerState":
        if kind == "adam":
            return cls(kind, 0, [np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])
        return cls(kind)


def optimizer_step(cfg: MethodConfig, params: list[Tensor], grads, state: OptimizerState) -> None:
    """Apply one sgd or adam update to ``params`` in place."""
    grads = list(grads)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
    lr = cfg.learning_rate
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p.data = p.data - lr * g
        return
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


_MINIMIZE = ("nll", "mse", "mae", "loss")
_MAXIMIZE = ("accuracy",)


def metric_direction(name: str, mode: str | None = None) -> str:
    """``"minimize"`` or ``"maximize"`` for a ``<split>_<metric>`` name.

    ``mode`` ("min"/"max") overrides the suffix table and is required for
    metrics it does not know.
    """
    if mode is not None:
        if mode not in ("min", "max"):
            raise ValueError(f"optimization mode must be 'min' or 'max', got {mode!r}")
        return "minimize" if mode == "min" else "maximize"
    suffix = name.rsplit("_", 1)[-1]
    if suffix in _MINIMIZE:
        return "minimize"
    if suffix in _MAXIMIZE:
        return "maximize"
    raise ValueError(f"cannot infer whether to minimize or maximize {name!r}; pass --optimization_mode min|max")


def metrics_for_task(task: TaskKind) -> list[str]:
    return {TaskKind.CLASSIFICATION: ["nll", "accuracy"], TaskKind.REGRESSION: ["mse", "mae"]}[TaskKind(task)]


def _correct(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(predictions, axis=1) == targets.astype(np.int64)


def accuracy(predictions: Tensor, targets: Tensor) -> float:
    if len(targets) == 0:
        return 0.0
    return float(_correct(predictions.data, targets.data).mean())


class MetricAccumulator:
    """Sample-weighted running sums, so split-level averages are exact."""

    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def update(self, sums: dict[str, float], n: int) -> None:
        for name, value in sums.items():
            self.sums[name] = self.sums.get(name, 0.0) + value
        self.count += n

    def compute(self, split: str) -> dict[str, float]:
        if self.count == 0:
            return {}
        return {f"{split}_{name}": total / self.count for name, total in self.sums.items()}


@dataclass
class MetricRecord:
    split: str
    epoch: int
    values: dict[str, float]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        for name in self.values:
            if not name.startswith(f"{self.split}_"):
                raise ValueError(f"metric {name!r} lacks the {self.split}_ prefix")

    def unprefixed(self) -> dict[str, float]:
        n = len(self.split) + 1
        return {k[n:]: v for k, v in self.values.items()}


class BaseMethod:
    """The default supervised recipe.

    Subclasses override `training_step`, `validation_step` or `test_step` to
    implement new algorithms, and `configure_model` to adapt a model to the
    datamodule's input/output dimensions.
    """

    name = "base"

    def __init__(
        self,
        task: TaskKind = TaskKind.CLASSIFICATION,
        loss: str | None = None,
        optimizer: str = "adam",
        learning_rate: float = 1e-3,
        regularizer: str = "none",
        regularizer_weight: float = 0.0,
        adam_beta1: float = 0.9,
        adam_beta2: float = 0.999,
        adam_epsilon: float = 1e-8,
        prune_sparsity: float | None = None,
        quantize_bits: int | None = None,
    ):
        self.task = TaskKind(task)
        if loss is None:
            loss = "crossentropy" if self.task is TaskKind.CLASSIFICATION else "mse"
        self.config = MethodConfig(
            self.name, loss, optimizer, learning_rate, regularizer, regularizer_weight,
            adam_beta1, adam_beta2, adam_epsilon,
        )
        if regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {regularizer!r}; expected one of {sorted(REGULARIZERS)}")
        self.eval_transforms = EvalTransformConfig(prune_sparsity, quantize_bits)
        self.optimizer_state: OptimizerState | None = None

    @classmethod
    def add_argparse_args(cls, parser) -> None:
        parser.add_argument("--method_optimizer", default="adam", choices=OPTIMIZERS, help="parameter update rule")
        parser.add_argument("--method_learning_rate", type=float, default=1e-3, help="step size")
        parser.add_argument(
            "--method_regularizer_weight", type=float, default=0.0, help="multiplier of the regularizer penalty"
        )
        parser.add_argument("--method_adam_beta1", type=float, default=0.9)
        parser.add_argument("--method_adam_beta2", type=float, default=0.999)
        parser.add_argument("--method_adam_epsilon", type=float, default=1e-8)
        parser.add_argument(
            "--method_prune_sparsity", type=float, default=None, help="magnitude-prune this fraction of weights at eval"
        )
        parser.add_argument(
            "--method_quantize_bits", type=int, default=None, help="simulate b-bit affine weight quantisation at eval"
        )

    @property
    def metric_names(self) -> list[str]:
        return metrics_for_task(self.task)

    def configure_model(self, model, datamodule) -> None:
        if model.input_dim != datamodule.input_dim:
            model.replace_input_layer(datamodule.input_dim)
        if model.output_dim != datamodule.output_dim:
            model.replace_output_layer(datamodule.output_dim)

    def configure_optimizer(self, model) -> OptimizerState:
        self.optimizer_state = OptimizerState.for_params(self.config.optimizer, model.parameters())
        return self.optimizer_state

    def batch_metric_sums(self, predictions: Tensor, targets: Tensor) -> dict[str, float]:
        n = len(targets)
        if self.task is TaskKind.CLASSIFICATION:
            with no_grad():
                nll = compute_loss("crossentropy", predictions, targets).item()
            return {"nll": nll * n, "accuracy": float(_correct(predictions.data, targets.data).sum())}
        err = predictions.data - targets.data.reshape(predictions.shape)
        return {
            "mse": float((err**2).reshape(n, -1).mean(axis=1).sum()),
            "mae": float(np.abs(err).reshape(n, -1).mean(axis=1).sum()),
        }

    def training_loss(self, model, predictions: Tensor, targets: Tensor) -> Tensor:
        cfg = self.config
        data_loss = compute_loss(cfg.loss, predictions, targets)
        return add(data_loss, regularizer_penalty(cfg.regularizer, model.parameters(), cfg.regularizer_weight))

    def training_step(self, model, batch: Batch, accumulator: MetricAccumulator | None = None) -> float:
        """Forward, loss plus penalty, backward, update. Returns the pre-update loss."""
        if self.optimizer_state is None:
            self.configure_optimizer(model)
        params = model.parameters()
        with Tape() as tape:
            predictions = model(batch.inputs)
            loss = self.training_loss(model, predictions, batch.targets)
        value = loss.item()
        backward(loss, tape)
        optimizer_step(self.config, params, [p.grad for p in params], self.optimizer_state)
        zero_grad(params)
        if accumulator is not None:
            sums = self.batch_metric_sums(predictions, batch.targets)
            sums["loss"] = value * len(batch)
            accumulator.update(sums, len(batch))
        return value

    def eval_step(self, model, batch: Batch, split: str, accumulator: MetricAccumulator) -> None:
        if split not in ("validation", "test"):
            raise ValueError(f"eval_step split must be validation or test, got {split!r}")
        with no_grad():
            predictions = model(batch.inputs)
        accumulator.update(self.batch_metric_sums(predictions, batch.targets), len(batch))

    def validation_step(self, model, batch: Batch, accumulator: MetricAccumulator) -> None:
        self.eval_step(model, batch, "validation", accumulator)

    def test_step(self, model, batch: Batch, accumulator: MetricAccumulator) -> None:
        self.eval_step(model, batch, "test", accumulator)

    def eval_model(self, model):
        """The model evaluation phases should run on: a transformed copy when transforms are set."""
        if self.eval_transforms.empty:
            return model
        return apply_eval_transforms(model, self.eval_transforms)
