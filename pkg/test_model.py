#!/usr/bin/env python3
"""
Tests for the layer primitives, the U-Net and the AdamW optimizer.
"""

import sys
import os
from collections import OrderedDict

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from nowcast.errors import ShapeError
from nowcast.layers import (
    conv_backward,
    conv_forward,
    maxpool_backward,
    maxpool_forward,
    upsample_backward,
    upsample_forward,
)
from nowcast.losses import softmax_bins
from nowcast.binning import decode
from nowcast.model import (
    ModelState,
    NetworkCheckTrial,
    UNetConfig,
    backward,
    forward,
    init,
    layer_specs,
    logits_to_bins,
    network_grad_check,
    parameter_count,
)
from nowcast.optimizer import adamw_step
from nowcast.tensor import RngState


def tiny_config(**overrides):
    values = dict(in_channels=4, out_channels=12, depth=2, base_width=2, input_frames=2)
    values.update(overrides)
    return UNetConfig(**values)


def naive_conv2d(x, weight, bias):
    n, c, h, w = x.shape
    k = weight.shape[-1]
    padded = np.pad(x, [(0, 0), (0, 0), (k // 2, k // 2), (k // 2, k // 2)])
    out = np.zeros((n, weight.shape[0], h, w))
    for b in range(n):
        for o in range(weight.shape[0]):
            for i in range(h):
                for j in range(w):
                    out[b, o, i, j] = np.sum(padded[b, :, i:i + k, j:j + k] * weight[o]) + bias[o]
    return out


def test_conv_forward_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    weight = rng.normal(size=(4, 3, 3, 3))
    bias = rng.normal(size=4)
    out, _ = conv_forward(x, weight, bias)
    assert np.allclose(out, naive_conv2d(x, weight, bias))


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 4, 4))
    weight = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    upstream = rng.normal(size=(1, 3, 4, 4))
    _, cache = conv_forward(x, weight, bias)
    dx, dw, db = conv_backward(upstream, cache)

    def objective(x_, w_, b_):
        return float(np.sum(conv_forward(x_, w_, b_)[0] * upstream))

    h = 1e-6
    for index in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 1, 3, 0)]:
        bumped = x.copy()
        bumped[index] += h
        assert dx[index] == pytest.approx((objective(bumped, weight, bias) - objective(x, weight, bias)) / h, rel=1e-4, abs=1e-5)
    for index in [(0, 0, 0, 0), (2, 1, 1, 2)]:
        bumped = weight.copy()
        bumped[index] += h
        assert dw[index] == pytest.approx((objective(x, bumped, bias) - objective(x, weight, bias)) / h, rel=1e-4, abs=1e-5)
    assert np.allclose(db, upstream.sum(axis=(0, 2, 3)))


def test_conv_works_in_three_dimensions():
    x = np.ones((1, 2, 3, 4, 4))
    out, cache = conv_forward(x, np.ones((5, 2, 3, 3, 3)), np.zeros(5))
    assert out.shape == (1, 5, 3, 4, 4)
    assert out[0, 0, 1, 1, 1] == 2 * 27
    dx, dw, _ = conv_backward(np.ones_like(out), cache)
    assert dx.shape == x.shape and dw.shape == (5, 2, 3, 3, 3)


def test_maxpool_routes_gradient_to_first_maximum():
    x = np.ones((1, 1, 2, 2))
    out, cache = maxpool_forward(x)
    assert out.tolist() == [[[[1.0]]]]
    grad = maxpool_backward(np.full_like(out, 3.0), cache)
    assert grad.tolist() == [[[[3.0, 0.0], [0.0, 0.0]]]]
    with pytest.raises(ShapeError):
        maxpool_forward(np.ones((1, 1, 3, 2)))


def test_upsample_and_its_adjoint():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    up = upsample_forward(x)
    assert up.shape == (1, 1, 4, 4) and up[0, 0, 3, 3] == 3.0
    assert upsample_backward(np.ones_like(up)).tolist() == [[[[4.0, 4.0], [4.0, 4.0]]]]


def test_parameter_count_by_hand():
    cfg = UNetConfig(in_channels=4, out_channels=6, depth=1, base_width=1, input_frames=1)
    # 9 * Cin + 107 + 2 * out_channels for depth 1, width 1
    assert parameter_count(cfg) == 9 * 4 + 107 + 2 * 6 == 155
    assert list(layer_specs(cfg)) == [
        "enc0.conv1", "enc0.conv2", "bottleneck.conv1", "bottleneck.conv2", "dec0.conv1", "dec0.conv2", "head",
    ]


def test_init_is_deterministic_with_zero_biases():
    cfg = tiny_config()
    a, b = init(cfg, RngState(3)), init(cfg, RngState(3))
    for key in a.params:
        assert np.array_equal(a.params[key], b.params[key])
        assert a.params[key].shape == a.moment1[key].shape == a.moment2[key].shape
        if key.endswith(".bias"):
            assert not a.params[key].any()
    bound = np.sqrt(6.0 / (4 * 9))
    assert np.abs(a.params["enc0.conv1.weight"]).max() <= bound


def test_forward_shape_contract():
    cfg = UNetConfig(in_channels=44, out_channels=96, depth=3, base_width=4, input_frames=4)
    state = init(cfg, RngState(0))
    logits, _ = forward(state, np.zeros((2, 44, 128, 128), dtype=np.float32))
    assert logits.shape == (2, 96, 128, 128)
    assert logits_to_bins(logits).shape == (2, 16, 6, 128, 128)


def test_forward_input_errors():
    state = init(tiny_config(), RngState(0))
    with pytest.raises(ShapeError, match="divisible"):
        forward(state, np.zeros((1, 4, 6, 6), dtype=np.float32))
    with pytest.raises(ShapeError):
        forward(state, np.zeros((1, 3, 8, 8), dtype=np.float32))


def test_zero_weights_decode_to_lowest_representative():
    state = init(tiny_config(), RngState(0))
    for key in state.params:
        state.params[key][...] = 0
    logits, _ = forward(state, np.random.default_rng(0).normal(size=(1, 4, 8, 8)).astype(np.float32))
    assert not logits.any()
    probs = softmax_bins(logits_to_bins(logits))
    assert np.allclose(probs, 1 / 6)
    assert np.allclose(decode(probs), 0.1)


def test_eval_forward_is_deterministic_and_batch_independent():
    state = init(tiny_config(dropout=0.4), RngState(1))
    x = np.random.default_rng(1).normal(size=(3, 4, 8, 8)).astype(np.float32)
    first, _ = forward(state, x)
    second, _ = forward(state, x)
    assert np.array_equal(first, second)
    alone, _ = forward(state, x[1:2])
    assert np.allclose(alone[0], first[1], atol=1e-5)


def test_dropout_needs_a_random_source_in_train_mode():
    state = init(tiny_config(dropout=0.4), RngState(1))
    x = np.ones((1, 4, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError):
        forward(state, x, train_mode=True)
    a, _ = forward(state, x, train_mode=True, rng=RngState(5))
    b, _ = forward(state, x, train_mode=True, rng=RngState(5))
    assert np.array_equal(a, b)


def test_backward_is_linear_in_upstream_gradient():
    state = init(tiny_config(), RngState(2))
    x = np.random.default_rng(2).normal(size=(2, 4, 8, 8)).astype(np.float32)
    logits, cache = forward(state, x)
    zero = backward(state, cache, np.zeros_like(logits))
    assert list(zero) == list(state.params)
    assert all(not g.any() for g in zero.values())

    upstream = np.random.default_rng(3).normal(size=logits.shape).astype(np.float32)
    once = backward(state, cache, upstream)
    twice = backward(state, cache, 2 * upstream)
    for key in once:
        assert np.allclose(twice[key], 2 * once[key], rtol=1e-5, atol=1e-6)
    with pytest.raises(ShapeError):
        backward(state, cache, upstream[:, :6])


def test_network_gradient_check_float32():
    assert network_grad_check(NetworkCheckTrial(), dtype=np.float32) < 1e-2


def test_network_gradient_check_float64():
    # a smaller step keeps the perturbed points away from ReLU kinks
    assert network_grad_check(NetworkCheckTrial(step=1e-5), dtype=np.float64) < 1e-4


def test_network_gradient_check_volumetric_variant():
    assert network_grad_check(NetworkCheckTrial(arch="unet3d", samples=20, step=1e-5), dtype=np.float64) < 1e-4


def test_volumetric_variant_has_the_same_logit_shape():
    x = np.random.default_rng(4).normal(size=(2, 4, 8, 8)).astype(np.float32)
    flat, _ = forward(init(tiny_config(), RngState(0)), x)
    volume, _ = forward(init(tiny_config(arch="unet3d"), RngState(0)), x)
    assert flat.shape == volume.shape


def scalar_state(value=0.5):
    params = OrderedDict(w=np.array([value]))
    return ModelState(
        unet=UNetConfig(),
        params=params,
        moment1=OrderedDict(w=np.zeros(1)),
        moment2=OrderedDict(w=np.zeros(1)),
    )


def test_adamw_single_step_oracle():
    state = scalar_state()
    g, lr = 0.3, 0.01
    adamw_step(state, {"w": np.array([g])}, lr, weight_decay=0.0)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert state.params["w"][0] == pytest.approx(0.5 - lr * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-12)
    assert state.step == 1


def test_adamw_zero_gradient():
    state = scalar_state()
    adamw_step(state, {"w": np.zeros(1)}, 0.01, weight_decay=0.0)
    assert state.params["w"][0] == 0.5
    adamw_step(state, {"w": np.zeros(1)}, 0.01, weight_decay=0.02)
    assert state.params["w"][0] == pytest.approx(0.5 * (1 - 0.01 * 0.02), abs=1e-15)


def test_adamw_updates_every_parameter_in_place():
    state = init(tiny_config(), RngState(0))
    before = state.copy()
    grads = {k: np.ones_like(v) for k, v in state.params.items()}
    adamw_step(state, grads, 1e-3)
    for key in state.params:
        assert not np.array_equal(state.params[key], before.params[key])
        assert state.params[key].dtype == np.float32


def test_adamw_rejects_mismatched_gradients():
    state = scalar_state()
    with pytest.raises(ShapeError):
        adamw_step(state, {"v": np.zeros(1)}, 0.01)
    with pytest.raises(ShapeError):
        adamw_step(state, {"w": np.zeros(2)}, 0.01)
