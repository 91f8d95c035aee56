"""Evaluation-time model transforms: global magnitude pruning and affine quantisation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalTransformConfig:
    """What to apply to a copy of the model before evaluating. Pruning runs first."""

    prune_sparsity: float | None = None
    quantize_bits: int | None = None

    def __post_init__(self):
        if self.prune_sparsity is not None and not 0.0 <= self.prune_sparsity <= 1.0:
            raise ValueError(f"prune sparsity must lie in [0, 1], got {self.prune_sparsity}")
        if self.quantize_bits is not None and not 2 <= self.quantize_bits <= 8:
            raise ValueError(f"quantize bits must lie in [2, 8], got {self.quantize_bits}")

    @property
    def empty(self) -> bool:
        return self.prune_sparsity is None and self.quantize_bits is None


def prune_magnitude(model, sparsity: float):
    """Copy of ``model`` with the floor(sparsity * N) smallest-magnitude weights zeroed.

    N counts the entries of every weight matrix together; biases are left
    alone. Equal magnitudes are taken in parameter order, then flat index.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    pruned = copy.deepcopy(model)
    weights = [layer.weight for layer in pruned.layers]
    flat = np.concatenate([w.data.reshape(-1) for w in weights])
    k = math.floor(sparsity * flat.size)
    if k == 0:
        return pruned
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(np.abs(flat), kind="stable")[:k]] = False
    start = 0
    for w in weights:
        n = w.size
        w.data = np.where(keep[start : start + n].reshape(w.shape), w.data, 0.0)
        start += n
    return pruned


def _affine_params(x: np.ndarray, bits: int) -> tuple[float, int]:
    qmax = 2**bits - 1
    lo = min(float(x.min(initial=0.0)), 0.0)
    hi = max(float(x.max(initial=0.0)), 0.0)
    scale = (hi - lo) / qmax if hi > lo else 1.0
    zero_point = int(np.clip(round(-lo / scale), 0, qmax))
    return scale, zero_point


def quantize_with(x, scale: float, zero_point: int, bits: int) -> np.ndarray:
    """Map reals onto the b-bit grid defined by ``scale`` and ``zero_point``."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.round(x / scale) + zero_point, 0, 2**bits - 1).astype(np.int64)


def quantize_affine(x, bits: int) -> tuple[np.ndarray, float, int]:
    """Asymmetric per-tensor quantisation over [min, max] widened to contain 0.

    Returns ``(q, scale, zero_point)``; ``(q - zero_point) * scale``
    reconstructs ``x`` to within ``scale / 2``.
    """
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must lie in [2, 8], got {bits}")
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    scale, zero_point = _affine_params(x, bits)
    return quantize_with(x, scale, zero_point, bits), scale, zero_point


def dequantize(q, scale: float, zero_point: int) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - zero_point) * scale


def apply_eval_transforms(model, cfg: EvalTransformConfig):
    """Transformed copy of ``model``; the original is never modified."""
    out = prune_magnitude(model, cfg.prune_sparsity) if cfg.prune_sparsity is not None else copy.deepcopy(model)
    if cfg.quantize_bits is not None:
        for layer in out.layers:
            q, scale, zero_point = quantize_affine(layer.weight.data, cfg.quantize_bits)
            layer.weight.data = dequantize(q, scale, zero_point)
    return out
