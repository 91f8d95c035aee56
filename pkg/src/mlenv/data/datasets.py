from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from mlenv.engine import Tensor


class TaskKind(str, enum.Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs and targets with stable per-sample ids.

    ``targets`` holds class indices (shape ``[N]``) for classification and real
    vectors (``[N, output_dim]``) for regression. ``ids`` identify samples
    across splits so disjointness can be checked.
    """

    inputs: np.ndarray
    targets: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if not (len(self.inputs) == len(self.targets) == len(self.ids)):
            raise ValueError(
                f"dataset fields disagree in length: inputs={len(self.inputs)}, "
                f"targets={len(self.targets)}, ids={len(self.ids)}"
            )

    @classmethod
    def from_arrays(cls, inputs, targets, id_offset: int = 0) -> "Dataset":
        inputs = np.asarray(inputs, dtype=np.float64)
        return cls(inputs, np.asarray(targets), np.arange(len(inputs)) + id_offset)

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.inputs[index], self.targets[index], self.ids[index])


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: Tensor
    targets: Tensor
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def batches(ds: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[Batch]:
    """Yield minibatches covering every sample exactly once; the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            Tensor._wrap(ds.inputs[idx].reshape(len(idx), -1)),
            Tensor._wrap(ds.targets[idx]),
            ds.ids[idx],
        )


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def split_indices(n: int, validation_portion: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) positions; validation size is floor(portion * n)."""
    if not 0.0 <= validation_portion < 1.0:
        raise ValueError(f"validation_portion must lie in [0, 1), got {validation_portion}")
    n_val = math.floor(validation_portion * n)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])
