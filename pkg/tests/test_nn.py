import math

import numpy as np
import pytest

from feddnc.errors import ConfigurationError, InputError, NumericError
from feddnc.nn import (
    Batch,
    FreezeMask,
    LayerSpec,
    ModelSpec,
    ParamEntry,
    ParameterSet,
    backward,
    flatten_layer,
    forward,
    init_params,
    loss_and_gradients,
    sgd_step,
    unflatten_layer,
)
from feddnc.rng import Rng

from oracles import brute_conv3x3_same, brute_dense_forward_loss, philox_uniform


def dense_head_spec(fan_in=4, classes=10, hidden=None):
    layers = []
    if hidden is None:
        layers.append(LayerSpec("dense1", "dense", fan_in=fan_in, fan_out=classes))
    else:
        layers.append(LayerSpec("dense1", "dense", fan_in=fan_in, fan_out=hidden))
        layers.append(LayerSpec("relu1", "relu"))
        layers.append(LayerSpec("dense2", "dense", fan_in=hidden, fan_out=classes))
    layers.append(LayerSpec("head", "softmax_xent_head"))
    return ModelSpec(tuple(layers), (fan_in,), classes)


def conv_spec(classes=5):
    layers = (
        LayerSpec("conv1", "conv2d", in_channels=2, out_channels=3),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool2x2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense1", "dense", fan_in=3 * 2 * 2, fan_out=classes),
        LayerSpec("head", "softmax_xent_head"),
    )
    return ModelSpec(layers, (2, 4, 4), classes)


def zero_params(spec):
    base = init_params(spec, Rng(0, 0))
    return ParameterSet(tuple(
        ParamEntry(e.layer_index, e.layer_name,
                   np.zeros_like(e.weight), np.zeros_like(e.bias))
        for e in base.entries
    ))


class TestSpecValidation:
    def test_rejects_single_layer(self):
        with pytest.raises(ConfigurationError):
            ModelSpec((LayerSpec("head", "softmax_xent_head"),), (10,), 10)

    def test_rejects_non_composing_shapes(self):
        layers = (
            LayerSpec("dense1", "dense", fan_in=4, fan_out=7),
            LayerSpec("head", "softmax_xent_head"),
        )
        with pytest.raises(ConfigurationError):
            ModelSpec(layers, (4,), 10)

    def test_rejects_duplicate_names(self):
        layers = (
            LayerSpec("a", "dense", fan_in=4, fan_out=4),
            LayerSpec("a", "dense", fan_in=4, fan_out=10),
            LayerSpec("head", "softmax_xent_head"),
        )
        with pytest.raises(ConfigurationError):
            ModelSpec(layers, (4,), 10)

    def test_rejects_odd_pool_input(self):
        layers = (
            LayerSpec("conv1", "conv2d", in_channels=1, out_channels=1),
            LayerSpec("pool", "maxpool2x2"),
            LayerSpec("flatten", "flatten"),
            LayerSpec("head", "softmax_xent_head"),
        )
        with pytest.raises(ConfigurationError):
            ModelSpec(layers, (1, 5, 5), 2)

    def test_param_layer_indices(self):
        spec = conv_spec()
        assert spec.param_layer_indices() == (1, 5)
        assert spec.num_param_layers == 2


class TestInitParams:
    def test_biases_zero(self):
        params = init_params(dense_head_spec(4, 4), Rng(3, 0))
        for e in params.entries:
            assert not e.bias.any()

    def test_bit_identical_for_same_stream(self):
        spec = conv_spec()
        a = init_params(spec, Rng(9, 2))
        b = init_params(spec, Rng(9, 2))
        for ea, eb in zip(a.entries, b.entries):
            assert np.array_equal(ea.weight, eb.weight)
            assert np.array_equal(ea.bias, eb.bias)

    def test_matches_scripted_prng_oracle(self):
        # dense 2x2, seed 7: reproduce uniform(-b, b) draws from the reference
        # Philox implementation and the Glorot bound formula.
        spec = dense_head_spec(fan_in=2, classes=2)
        params = init_params(spec, Rng(7, 0))
        bound = math.sqrt(6.0 / (2 + 2))
        expected = np.array(philox_uniform(7, 0, 4, -bound, bound), dtype=np.float32)
        assert np.array_equal(params.entries[0].weight.ravel(), expected)

    def test_weights_within_glorot_bound(self):
        spec = conv_spec()
        params = init_params(spec, Rng(1, 0))
        conv_bound = math.sqrt(6.0 / (2 * 9 + 3 * 9))
        assert np.abs(params.entries[0].weight).max() <= conv_bound


class TestForward:
    def test_zero_weights_give_uniform_predictions(self):
        spec = dense_head_spec(4, 10)
        params = zero_params(spec)
        batch = Batch(np.ones((6, 4), dtype=np.float32), np.arange(6) % 10)
        loss, probs = forward(spec, params, batch)
        assert np.allclose(probs, 0.1, atol=1e-7)
        assert loss == pytest.approx(math.log(10.0), abs=1e-6)

    def test_saturated_softmax_loss_tiny(self):
        spec = dense_head_spec(1, 10)
        params = zero_params(spec)
        w = np.zeros((1, 10), dtype=np.float32)
        w[0, 3] = 30.0
        params = unflatten_layer(params, 1, np.concatenate([w.ravel(), np.zeros(10, np.float32)]))
        loss, _ = forward(spec, params, Batch(np.ones((1, 1), np.float32), np.array([3])))
        assert loss < 1e-3

    def test_matches_brute_force_dense_oracle(self):
        spec = dense_head_spec(5, 4, hidden=6)
        params = init_params(spec, Rng(21, 0))
        gen = Rng(21, 1).generator()
        batch = Batch(
            gen.standard_normal((7, 5)).astype(np.float32),
            gen.integers(0, 4, 7).astype(np.int64),
        )
        loss, _ = forward(spec, params, batch)
        expected = brute_dense_forward_loss(
            [params.entries[0].weight, params.entries[1].weight],
            [params.entries[0].bias, params.entries[1].bias],
            batch.features,
            batch.labels,
            relu_after=[True, False],
        )
        assert loss == pytest.approx(expected, abs=1e-5)

    def test_conv_matches_brute_force_loops(self):
        spec = conv_spec()
        params = init_params(spec, Rng(5, 0))
        gen = Rng(5, 1).generator()
        x = gen.standard_normal((3, 2, 4, 4)).astype(np.float32)
        conv = params.entries[0]
        expected = brute_conv3x3_same(
            x.astype(np.float64), conv.weight.astype(np.float64), conv.bias.astype(np.float64)
        )
        from feddnc.nn import _conv_forward  # noqa: PLC0415 - white-box check

        got, _ = _conv_forward(x.astype(np.float64), conv.weight.astype(np.float64),
                               conv.bias.astype(np.float64))
        assert np.allclose(got, expected, atol=1e-10)

    def test_rows_sum_to_one_and_loss_nonnegative(self):
        spec = conv_spec()
        params = init_params(spec, Rng(8, 0))
        gen = Rng(8, 1).generator()
        batch = Batch(
            gen.uniform(0, 1, (9, 2, 4, 4)).astype(np.float32),
            gen.integers(0, 5, 9).astype(np.int64),
        )
        loss, probs = forward(spec, params, batch)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
        assert loss >= 0.0

    def test_shape_mismatch_raises(self):
        spec = dense_head_spec(4, 10)
        params = zero_params(spec)
        with pytest.raises(InputError):
            forward(spec, params, Batch(np.ones((2, 5), np.float32), np.zeros(2, np.int64)))
        with pytest.raises(InputError):
            forward(spec, params, Batch(np.ones((2, 4), np.float32), np.array([0, 10])))


def finite_difference_check(spec, params, batch, eps=1e-3):
    """Max relative error of backprop vs central differences, all components.

    Perturbed parameters are stored back as float32, so the divisor is the
    realized perturbation, not the nominal eps.
    """
    grads = backward(spec, params, batch)
    worst = 0.0
    for e in params.entries:
        base = flatten_layer(params, e.layer_index).astype(np.float64)
        grad_flat = np.concatenate([
            grads[e.layer_index][0].ravel(), grads[e.layer_index][1].ravel()
        ]).astype(np.float64)
        for i in range(base.size):
            plus, minus = base.copy(), base.copy()
            plus[i] += eps
            minus[i] -= eps
            p32, m32 = plus.astype(np.float32), minus.astype(np.float32)
            loss_p, _ = forward(spec, unflatten_layer(params, e.layer_index, p32), batch)
            loss_m, _ = forward(spec, unflatten_layer(params, e.layer_index, m32), batch)
            fd = (loss_p - loss_m) / (float(p32[i]) - float(m32[i]))
            bp = grad_flat[i]
            worst = max(worst, abs(fd - bp) / max(abs(fd), abs(bp), 1e-6))
    return worst


class TestBackward:
    def test_gradients_match_finite_differences_all_layer_kinds(self):
        # conv + relu + pool + flatten + dense + head in one net, < 500 params
        spec = conv_spec()
        params = init_params(spec, Rng(13, 0))
        assert params.total_scalars <= 500
        gen = Rng(13, 1).generator()
        batch = Batch(
            gen.standard_normal((4, 2, 4, 4)).astype(np.float32),
            gen.integers(0, 5, 4).astype(np.int64),
        )
        assert finite_difference_check(spec, params, batch) < 1e-3

    def test_gradients_match_finite_differences_dense_stack(self):
        spec = dense_head_spec(6, 5, hidden=8)
        params = init_params(spec, Rng(17, 0))
        assert params.total_scalars <= 500
        gen = Rng(17, 1).generator()
        batch = Batch(
            gen.standard_normal((5, 6)).astype(np.float32),
            gen.integers(0, 5, 5).astype(np.int64),
        )
        assert finite_difference_check(spec, params, batch) < 1e-3

    def test_duplicated_batch_keeps_gradients(self):
        spec = dense_head_spec(4, 3, hidden=5)
        params = init_params(spec, Rng(19, 0))
        gen = Rng(19, 1).generator()
        feats = gen.standard_normal((6, 4)).astype(np.float32)
        labels = gen.integers(0, 3, 6).astype(np.int64)
        g1 = backward(spec, params, Batch(feats, labels))
        g2 = backward(spec, params, Batch(np.concatenate([feats, feats]),
                                          np.concatenate([labels, labels])))
        for idx in g1:
            assert np.allclose(g1[idx][0], g2[idx][0], atol=1e-7)
            assert np.allclose(g1[idx][1], g2[idx][1], atol=1e-7)

    def test_symmetric_batch_zero_bias_gradient(self):
        spec = dense_head_spec(3, 2)
        params = zero_params(spec)
        x = np.array([[0.3, -1.2, 0.7]], dtype=np.float32)
        feats = np.concatenate([x, -x])
        labels = np.array([0, 1], dtype=np.int64)
        grads = backward(spec, params, Batch(feats, labels))
        assert not grads[1][1].any()


class TestSgdStep:
    def test_zero_lr_is_identity(self):
        spec = dense_head_spec(4, 3)
        params = init_params(spec, Rng(2, 0))
        grads = {1: (np.ones_like(params.entries[0].weight),
                     np.ones_like(params.entries[0].bias))}
        out = sgd_step(params, grads, 0.0, FreezeMask.none_frozen(spec))
        assert np.array_equal(out.entries[0].weight, params.entries[0].weight)

    def test_basic_arithmetic(self):
        spec = ModelSpec(
            (LayerSpec("d", "dense", fan_in=1, fan_out=2),
             LayerSpec("head", "softmax_xent_head")),
            (1,), 2,
        )
        params = unflatten_layer(zero_params(spec), 1,
                                 np.array([1.0, 1.0, 0.0, 0.0], np.float32))
        grads = {1: (np.array([[0.5, 0.5]], np.float32), np.zeros(2, np.float32))}
        out = sgd_step(params, grads, 0.1, FreezeMask.none_frozen(spec))
        assert out.entries[0].weight[0, 0] == np.float32(0.95)

    def test_all_frozen_is_identity(self):
        spec = dense_head_spec(4, 3)
        params = init_params(spec, Rng(2, 0))
        grads = {1: (np.full_like(params.entries[0].weight, 9.0),
                     np.full_like(params.entries[0].bias, 9.0))}
        mask = FreezeMask.from_frozen_indices(spec, {1})
        out = sgd_step(params, grads, 0.5, mask)
        assert out.entries[0] is params.entries[0]

    def test_non_finite_gradient_aborts(self):
        spec = dense_head_spec(4, 3)
        params = init_params(spec, Rng(2, 0))
        bad = np.ones_like(params.entries[0].weight)
        bad[0, 0] = np.nan
        with pytest.raises(NumericError):
            sgd_step(params, {1: (bad, np.zeros(3, np.float32))}, 0.1,
                     FreezeMask.none_frozen(spec))

    def test_freeze_invariance_over_step_sequences(self):
        spec = conv_spec()
        params = init_params(spec, Rng(31, 0))
        frozen_before = params.entries[0].weight.copy()
        mask = FreezeMask.from_frozen_indices(spec, {1})
        gen = Rng(31, 1).generator()
        for _ in range(5):
            batch = Batch(
                gen.standard_normal((4, 2, 4, 4)).astype(np.float32),
                gen.integers(0, 5, 4).astype(np.int64),
            )
            params = sgd_step(params, backward(spec, params, batch), 0.05, mask)
        assert np.array_equal(params.entries[0].weight, frozen_before)

    def test_training_is_deterministic(self):
        spec = dense_head_spec(4, 3, hidden=5)

        def train():
            params = init_params(spec, Rng(11, 0))
            gen = Rng(11, 1).generator()
            mask = FreezeMask.none_frozen(spec)
            for _ in range(10):
                batch = Batch(
                    gen.standard_normal((8, 4)).astype(np.float32),
                    gen.integers(0, 3, 8).astype(np.int64),
                )
                params = sgd_step(params, backward(spec, params, batch), 0.1, mask)
            return params

        a, b = train(), train()
        for ea, eb in zip(a.entries, b.entries):
            assert np.array_equal(ea.weight, eb.weight)
            assert np.array_equal(ea.bias, eb.bias)


class TestFlattenLayer:
    def test_definition(self):
        spec = ModelSpec(
            (LayerSpec("d", "dense", fan_in=2, fan_out=2),
             LayerSpec("head", "softmax_xent_head")),
            (2,), 2,
        )
        params = ParameterSet((
            ParamEntry(1, "d", np.array([[1, 2], [3, 4]], np.float32),
                       np.array([5, 6], np.float32)),
        ))
        assert flatten_layer(params, 1).tolist() == [1, 2, 3, 4, 5, 6]

    def test_conv_length(self):
        spec = conv_spec()
        params = init_params(spec, Rng(0, 0))
        assert flatten_layer(params, 1).size == 2 * 3 * 9 + 3

    def test_round_trip_bit_exact(self):
        spec = conv_spec()
        params = init_params(spec, Rng(4, 0))
        vec = flatten_layer(params, 1)
        rebuilt = unflatten_layer(params, 1, vec)
        assert np.array_equal(rebuilt.entries[0].weight, params.entries[0].weight)
        assert np.array_equal(rebuilt.entries[0].bias, params.entries[0].bias)

    def test_non_parameterized_index_raises(self):
        spec = conv_spec()
        params = init_params(spec, Rng(4, 0))
        with pytest.raises(InputError):
            flatten_layer(params, 2)
