from mlenv.data.datamodule import (
    BaseDataModule,
    MNISTDataModule,
    SyntheticClassificationDataModule,
    SyntheticRegressionDataModule,
)
from mlenv.data.datasets import Batch, Dataset, TaskKind, batches, num_batches, split_indices
from mlenv.data.idx import BadMagicError, IdxError, TruncatedError, UnsupportedTypeError, load_idx, write_idx
from mlenv.data.synthetic import make_synthetic_classification, make_synthetic_regression, regression_truth

__all__ = [
    "BadMagicError",
    "BaseDataModule",
    "Batch",
    "Dataset",
    "IdxError",
    "MNISTDataModule",
    "SyntheticClassificationDataModule",
    "SyntheticRegressionDataModule",
    "TaskKind",
    "TruncatedError",
    "UnsupportedTypeError",
    "batches",
    "load_idx",
    "make_synthetic_classification",
    "make_synthetic_regression",
    "num_batches",
    "regression_truth",
    "split_indices",
    "write_idx",
]
