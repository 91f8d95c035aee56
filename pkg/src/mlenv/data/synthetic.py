"""Deterministic toy datasets for desk-scale runs."""

from __future__ import annotations

import numpy as np

from mlenv.data.datasets import Dataset

BLOB_RADIUS = 2.0
BLOB_SD = 0.5

# independent streams for a single seed
_STREAM_POINTS, _STREAM_TRUTH, _STREAM_NOISE = 0, 1, 2


def blob_centers(classes: int) -> np.ndarray:
    """``classes`` points spaced evenly on a circle of radius ``BLOB_RADIUS``."""
    angles = 2 * np.pi * np.arange(classes) / classes
    return BLOB_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_synthetic_classification(n: int, classes: int, seed: int) -> Dataset:
    """Gaussian blobs in 2-D, one per class, balanced to within one sample."""
    if not n >= classes >= 2:
        raise ValueError(f"need n >= classes >= 2, got n={n}, classes={classes}")
    rng = np.random.default_rng([seed, _STREAM_POINTS])
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    points = blob_centers(classes)[labels] + rng.normal(scale=BLOB_SD, size=(n, 2))
    return Dataset.from_arrays(points, labels.astype(np.int64))


def regression_truth(seed: int, input_dim: int, output_dim: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """The ``(w*, b*)`` that `make_synthetic_regression` uses for ``seed``."""
    rng = np.random.default_rng([seed, _STREAM_TRUTH])
    return rng.uniform(-2, 2, size=(input_dim, output_dim)), rng.uniform(-1, 1, size=output_dim)


def make_synthetic_regression(
    n: int, noise_sd: float, seed: int, input_dim: int = 4, output_dim: int = 1
) -> Dataset:
    """Linear targets ``x @ w* + b*`` plus seeded gaussian noise."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
    w, b = regression_truth(seed, input_dim, output_dim)
    x = np.random.default_rng([seed, _STREAM_POINTS]).normal(size=(n, input_dim))
    y = x @ w + b
    if noise_sd > 0:
        y = y + np.random.default_rng([seed, _STREAM_NOISE]).normal(scale=noise_sd, size=y.shape)
    return Dataset.from_arrays(x, y)
