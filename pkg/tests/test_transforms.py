import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlenv.models import build_fc
from mlenv.transforms import (
    EvalTransformConfig,
    apply_eval_transforms,
    dequantize,
    prune_magnitude,
    quantize_affine,
    quantize_with,
)


def weights(model):
    return [layer.weight.data.copy() for layer in model.layers]


def biases(model):
    return [layer.bias.data.copy() for layer in model.layers]


def set_weights(model, arrays):
    for layer, a in zip(model.layers, arrays):
        layer.weight.data = np.asarray(a, dtype=float).reshape(layer.weight.shape)


def small_model(seed=0):
    model = build_fc(3, 2, 4, 2, seed=seed)
    for layer in model.layers:
        layer.bias.data = np.random.default_rng(seed + 100).normal(size=layer.bias.shape)
    return model


class TestPrune:
    def test_zero_sparsity_is_identity(self):
        model = small_model()
        out = prune_magnitude(model, 0.0)
        assert out is not model
        assert all(np.array_equal(a, b) for a, b in zip(weights(out), weights(model)))

    def test_full_sparsity_keeps_biases(self):
        model = small_model()
        out = prune_magnitude(model, 1.0)
        assert not any(w.any() for w in weights(out))
        assert all(np.array_equal(a, b) for a, b in zip(biases(out), biases(model)))

    def test_sort_oracle(self):
        model = build_fc(1, 1, 2, 1)  # weights [1x2] and [2x1]: four entries
        set_weights(model, [[0.1, -0.5], [0.2, 0.05]])
        out = prune_magnitude(model, 0.5)
        flat = np.concatenate([w.reshape(-1) for w in weights(out)])
        assert flat.tolist() == [0.0, -0.5, 0.2, 0.0]

    def test_ties_by_parameter_then_index(self):
        model = build_fc(1, 1, 2, 1)
        set_weights(model, [[0.3, 0.3], [0.3, 0.3]])
        flat = np.concatenate([w.reshape(-1) for w in weights(prune_magnitude(model, 0.75))])
        assert flat.tolist() == [0.0, 0.0, 0.0, 0.3]

    def test_original_untouched(self):
        model = small_model()
        before = weights(model)
        prune_magnitude(model, 0.6)
        assert all(np.array_equal(a, b) for a, b in zip(before, weights(model)))

    def test_rejects_bad_sparsity(self):
        with pytest.raises(ValueError):
            prune_magnitude(small_model(), 1.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, seed, s1, s2):
        s1, s2 = sorted((s1, s2))
        model = small_model(seed)
        z1 = [w == 0 for w in weights(prune_magnitude(model, s1))]
        z2 = [w == 0 for w in weights(prune_magnitude(model, s2))]
        assert all((a <= b).all() for a, b in zip(z1, z2))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_sparsity_exact(self, seed, s):
        model = small_model(seed)
        n = sum(w.size for w in weights(model))
        zeros = sum(int((w == 0).sum()) for w in weights(prune_magnitude(model, s)))
        assert zeros == math.floor(s * n)


class TestQuantize:
    def test_zeros_exact(self):
        q, scale, zp = quantize_affine(np.zeros(5), 4)
        assert scale == 1.0 and not dequantize(q, scale, zp).any()

    def test_scale_formula(self):
        _, scale, zp = quantize_affine(np.linspace(-1, 1, 11), 8)
        assert scale == pytest.approx(2 / 255) and scale == pytest.approx(0.007843, abs=1e-6)
        assert 0 <= zp <= 255

    def test_range_widened_to_zero(self):
        _, scale, zp = quantize_affine(np.array([2.0, 3.0]), 2)
        assert scale == pytest.approx(1.0) and zp == 0

    def test_zero_is_exact_on_grid(self):
        q, scale, zp = quantize_affine(np.array([-0.7, 0.0, 1.3]), 5)
        assert dequantize(q, scale, zp)[1] == 0.0

    @pytest.mark.parametrize("bits", [1, 9])
    def test_bits_range(self, bits):
        with pytest.raises(ValueError):
            quantize_affine(np.ones(2), bits)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 8), st.floats(0.01, 100))
    def test_error_bound_and_idempotence(self, seed, bits, spread):
        x = np.random.default_rng(seed).normal(scale=spread, size=17) + spread / 3
        q, scale, zp = quantize_affine(x, bits)
        assert q.min() >= 0 and q.max() <= 2**bits - 1
        assert (np.abs(dequantize(q, scale, zp) - x) <= scale / 2 + 1e-12).all()
        assert np.array_equal(quantize_with(dequantize(q, scale, zp), scale, zp, bits), q)


class TestApply:
    def test_empty_is_copy(self):
        model = small_model()
        out = apply_eval_transforms(model, EvalTransformConfig())
        assert out is not model
        assert all(np.array_equal(a, b) for a, b in zip(weights(out), weights(model)))

    def test_prune_all_then_quantize(self):
        out = apply_eval_transforms(small_model(), EvalTransformConfig(1.0, 4))
        assert not any(w.any() for w in weights(out))

    def test_training_model_not_mutated(self):
        model = small_model()
        before = weights(model)
        apply_eval_transforms(model, EvalTransformConfig(0.5, 3))
        assert all(np.array_equal(a, b) for a, b in zip(before, weights(model)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalTransformConfig(prune_sparsity=-0.1)
        with pytest.raises(ValueError):
            EvalTransformConfig(quantize_bits=16)

    def test_quantized_weights_on_few_levels(self):
        out = apply_eval_transforms(build_fc(10, 5, 20, 2), EvalTransformConfig(quantize_bits=2))
        assert all(len(np.unique(w)) <= 4 for w in weights(out))
