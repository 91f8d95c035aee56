from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from mlenv.data.datasets import Batch, Dataset, TaskKind, batches, split_indices
from mlenv.data.idx import load_idx
from mlenv.data.synthetic import make_synthetic_classification, make_synthetic_regression

logger = logging.getLogger(__name__)


class BaseDataModule:
    """Owns acquisition, preprocessing, splitting and batching of one dataset.

    Subclasses set ``name``, ``task``, ``input_shape`` and ``output_dim`` (the
    latter two in ``__init__`` so a model can be sized before any data is
    read) and implement `_load`, which returns the train pool and the test set.
    """

    name = "base"
    task: TaskKind

    def __init__(self, batch_size: int = 256, validation_portion: float = 0.1, seed: int = 0):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.batch_size = batch_size
        self.validation_portion = validation_portion
        self.seed = seed
        self.input_shape: tuple[int, ...] = ()
        self.output_dim = 0
        self.train: Dataset | None = None
        self.validation: Dataset | None = None
        self.test: Dataset | None = None
        self._pool: Dataset | None = None

    @classmethod
    def add_argparse_args(cls, parser) -> None:
        parser.add_argument("--datamodule_batch_size", type=int, default=256, help="minibatch size")
        parser.add_argument(
            "--datamodule_validation_portion",
            type=float,
            default=0.1,
            help="fraction of the training pool held out for validation",
        )

    @property
    def input_dim(self) -> int:
        return math.prod(self.input_shape)

    def _load(self, root: Path) -> tuple[Dataset, Dataset]:
        raise NotImplementedError

    def prepare(self, data_root=".") -> None:
        if self._pool is not None:
            return
        self._pool, self.test = self._load(Path(data_root) / self.name)
        logger.info("%s: %d train-pool samples, %d test samples", self.name, len(self._pool), len(self.test))

    def split(self, validation_portion: float | None = None, seed: int | None = None) -> None:
        if self._pool is None:
            raise RuntimeError(f"{self.name}: prepare() must run before split()")
        portion = self.validation_portion if validation_portion is None else validation_portion
        train_idx, val_idx = split_indices(len(self._pool), portion, self.seed if seed is None else seed)
        self.train = self._pool.subset(train_idx)
        self.validation = self._pool.subset(val_idx)

    def setup(self, data_root=".") -> None:
        self.prepare(data_root)
        self.split()

    @property
    def pool_size(self) -> int:
        return len(self._pool) if self._pool is not None else 0

    def train_batches(self, seed: int) -> Iterator[Batch]:
        return batches(self.train, self.batch_size, shuffle=True, seed=seed)

    def eval_batches(self, split: str) -> Iterator[Batch]:
        return batches(getattr(self, split), self.batch_size, shuffle=False)


class MNISTDataModule(BaseDataModule):
    """MNIST read from IDX files in ``<data_root>/mnist/`` (plain or ``.gz``)."""

    name = "mnist"
    task = TaskKind.CLASSIFICATION
    files = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }

    def __init__(self, batch_size: int = 256, validation_portion: float = 0.1, seed: int = 0):
        super().__init__(batch_size, validation_portion, seed)
        self.input_shape = (28 * 28,)
        self.output_dim = 10

    @staticmethod
    def _locate(root: Path, stem: str) -> Path:
        for candidate in (root / stem, root / f"{stem}.gz"):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"missing MNIST file: {root / stem} (or {stem}.gz)")

    def _read_pair(self, root: Path, which: str) -> tuple[np.ndarray, np.ndarray]:
        images_path = self._locate(root, self.files[f"{which}_images"])
        labels_path = self._locate(root, self.files[f"{which}_labels"])
        images, labels = load_idx(images_path), load_idx(labels_path)
        if images.ndim != 3 or images.shape[1:] != (28, 28):
            raise ValueError(f"{images_path}: expected [N, 28, 28] images, got {images.shape}")
        if labels.ndim != 1 or len(labels) != len(images):
            raise ValueError(f"{labels_path}: {labels.shape} labels do not match {len(images)} images")
        if labels.size and labels.max() > 9:
            raise ValueError(f"{labels_path}: label {labels.max()} outside 0-9")
        return images.reshape(len(images), -1).astype(np.float64) / 255.0, labels.astype(np.int64)

    def _load(self, root: Path) -> tuple[Dataset, Dataset]:
        x_train, y_train = self._read_pair(root, "train")
        x_test, y_test = self._read_pair(root, "test")
        pool = Dataset.from_arrays(x_train, y_train)
        return pool, Dataset.from_arrays(x_test, y_test, id_offset=len(pool))


class _SyntheticDataModule(BaseDataModule):
    def __init__(self, batch_size=256, validation_portion=0.1, seed=0, n_samples=3000, test_portion=0.2):
        super().__init__(batch_size, validation_portion, seed)
        if not 0.0 < test_portion < 1.0:
            raise ValueError(f"test_portion must lie in (0, 1), got {test_portion}")
        self.n_samples = n_samples
        self.test_portion = test_portion

    @classmethod
    def add_argparse_args(cls, parser) -> None:
        super().add_argparse_args(parser)
        parser.add_argument("--datamodule_n_samples", type=int, default=3000, help="samples generated in total")
        parser.add_argument(
            "--datamodule_test_portion", type=float, default=0.2, help="fraction of generated samples used for test"
        )

    def _generate(self) -> Dataset:
        raise NotImplementedError

    def _load(self, root: Path) -> tuple[Dataset, Dataset]:
        data = self._generate()
        n_test = math.floor(self.test_portion * len(data))
        # generation order is already random; the tail is the test set
        return data.subset(np.arange(len(data) - n_test)), data.subset(np.arange(len(data) - n_test, len(data)))


class SyntheticClassificationDataModule(_SyntheticDataModule):
    name = "synthetic_classification"
    task = TaskKind.CLASSIFICATION

    def __init__(self, batch_size=256, validation_portion=0.1, seed=0, n_samples=3000, test_portion=0.2, n_classes=3):
        super().__init__(batch_size, validation_portion, seed, n_samples, test_portion)
        self.n_classes = n_classes
        self.input_shape = (2,)
        self.output_dim = n_classes

    @classmethod
    def add_argparse_args(cls, parser) -> None:
        super().add_argparse_args(parser)
        parser.add_argument("--datamodule_n_classes", type=int, default=3, help="number of gaussian blobs")

    def _generate(self) -> Dataset:
        return make_synthetic_classification(self.n_samples, self.n_classes, self.seed)


class SyntheticRegressionDataModule(_SyntheticDataModule):
    name = "synthetic_regression"
    task = TaskKind.REGRESSION

    def __init__(
        self, batch_size=256, validation_portion=0.1, seed=0, n_samples=3000, test_portion=0.2,
        input_dim=4, noise_sd=0.1,
    ):
        super().__init__(batch_size, validation_portion, seed, n_samples, test_portion)
        self.noise_sd = noise_sd
        self.input_shape = (input_dim,)
        self.output_dim = 1

    @classmethod
    def add_argparse_args(cls, parser) -> None:
        super().add_argparse_args(parser)
        parser.add_argument("--datamodule_input_dim", type=int, default=4, help="feature count")
        parser.add_argument("--datamodule_noise_sd", type=float, default=0.1, help="target noise standard deviation")

    def _generate(self) -> Dataset:
        return make_synthetic_regression(self.n_samples, self.noise_sd, self.seed, self.input_shape[0])
