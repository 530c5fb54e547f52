#!/usr/bin/env python3
"""
Tests for the Dice and Multi-Level Dice losses and their analytic gradients.
"""

import sys
import os

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from nowcast import losses
from nowcast.binning import DEFAULT_BINS, onehot_targets
from nowcast.errors import ShapeError
from nowcast.losses import (
    GradCheckTrial,
    LossConfig,
    LossResult,
    dice_loss,
    grad_check,
    logcosh_wrap,
    loss_value,
    loss_with_grad,
    ml_dice_loss,
    softmax_bins,
)

REPS = DEFAULT_BINS.representatives
PLAIN = LossConfig(use_logcosh=False)


def onehot_probs(index):
    probs = np.zeros((1, 6, 1, 1))
    probs[0, index] = 1.0
    return probs


def truth_pixel(bin_index):
    return np.full((1, 1, 1), REPS[bin_index])


def test_softmax_bins():
    assert np.allclose(softmax_bins(np.zeros((2, 6, 3, 3))), 1 / 6)
    peaked = softmax_bins(np.array([10.0, 0, 0, 0, 0, 0]).reshape(1, 6, 1, 1))
    assert peaked[0, 0, 0, 0] > 0.9999
    logits = np.random.default_rng(0).normal(size=(2, 6, 2, 2))
    assert np.allclose(softmax_bins(logits), softmax_bins(logits + 5.0))
    assert softmax_bins(logits.astype(np.float32)).dtype == np.float32
    with pytest.raises(ValueError):
        softmax_bins(np.full((1, 6, 1, 1), np.nan))


def test_dice_single_pixel_cases():
    truth = onehot_targets(truth_pixel(2))
    assert dice_loss(onehot_probs(2), truth, PLAIN) == pytest.approx(0.0, abs=1e-6)
    assert dice_loss(onehot_probs(3), truth, PLAIN) == pytest.approx(1 / 3, abs=1e-5)
    assert dice_loss(onehot_probs(4), truth, PLAIN) == pytest.approx(1 / 3, abs=1e-5)


def test_dice_is_indifferent_to_which_bin_is_wrong():
    for true_bin in range(6):
        truth = onehot_targets(truth_pixel(true_bin))
        wrong = [dice_loss(onehot_probs(j), truth, PLAIN) for j in range(6) if j != true_bin]
        assert max(wrong) - min(wrong) < 1e-9


def test_ml_dice_single_pixel_cases():
    truth = truth_pixel(2)
    assert ml_dice_loss(onehot_probs(2), truth, DEFAULT_BINS, PLAIN) == pytest.approx(0.0, abs=1e-6)
    assert ml_dice_loss(onehot_probs(3), truth, DEFAULT_BINS, PLAIN) == pytest.approx(0.2, abs=1e-5)
    assert ml_dice_loss(onehot_probs(4), truth, DEFAULT_BINS, PLAIN) == pytest.approx(0.4, abs=1e-5)


def test_ml_dice_is_ordinal():
    for i in range(6):
        row = [ml_dice_loss(onehot_probs(j), truth_pixel(i), DEFAULT_BINS, PLAIN) for j in range(6)]
        for j in range(i, 5):
            assert row[j + 1] > row[j]
        for j in range(i, 0, -1):
            assert row[j - 1] > row[j]


def test_perfect_prediction_scores_near_zero():
    rates = np.random.default_rng(1).exponential(5.0, size=(2, 4, 4))
    probs = onehot_targets(rates).astype(np.float64)
    assert dice_loss(probs, onehot_targets(rates), PLAIN) <= 10 * PLAIN.epsilon
    assert ml_dice_loss(probs, rates, DEFAULT_BINS, PLAIN) <= 10 * PLAIN.epsilon


def test_literal_numerator_factor():
    literal = LossConfig(use_logcosh=False, numerator_factor=1)
    truth = onehot_targets(truth_pixel(2))
    # the occupied class scores 1/2, the five empty ones score 1
    assert dice_loss(onehot_probs(2), truth, literal) == pytest.approx(1 / 12, abs=1e-5)


def test_losses_lie_in_unit_interval():
    rng = np.random.default_rng(2)
    for _ in range(10):
        probs = rng.dirichlet(np.ones(6), size=(2, 3, 3)).transpose(0, 3, 1, 2)
        rates = rng.exponential(5.0, size=(2, 3, 3))
        assert 0.0 <= dice_loss(probs, onehot_targets(rates), PLAIN) <= 1.0
        assert 0.0 <= ml_dice_loss(probs, rates, DEFAULT_BINS, PLAIN) <= 1.0


def test_loss_shape_and_rate_errors():
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((1, 6, 2, 2)), np.zeros((1, 6, 2, 3)))
    with pytest.raises(ShapeError):
        ml_dice_loss(np.zeros((1, 6, 2, 2)), np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        ml_dice_loss(np.zeros((1, 6, 1, 1)), np.full((1, 1, 1), -1.0))


def test_logcosh_wrap():
    assert logcosh_wrap(0.0) == 0.0
    assert logcosh_wrap(0.01) == pytest.approx(0.00005, rel=1e-3)
    assert logcosh_wrap(100.0) == pytest.approx(99.30685, abs=1e-5)
    xs = np.linspace(0.0, 5.0, 51)
    values = [logcosh_wrap(x) for x in xs]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert all(v <= x for v, x in zip(values, xs))


@pytest.mark.parametrize("kind", ["dice", "ml_dice"])
def test_loss_is_shift_invariant_and_gradient_sums_to_zero(kind):
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 6, 3, 3))
    rates = rng.exponential(5.0, size=(2, 3, 3))
    cfg = LossConfig(loss_kind=kind)
    base = loss_with_grad(logits, rates, DEFAULT_BINS, cfg)
    shifted = loss_with_grad(logits + 2.5, rates, DEFAULT_BINS, cfg)
    assert shifted.value == pytest.approx(base.value, abs=1e-12)
    assert np.allclose(base.grad_logits.sum(axis=1), 0.0, atol=1e-12)
    assert base.value == pytest.approx(loss_value(logits, rates, DEFAULT_BINS, cfg), abs=1e-12)


def test_gradient_keeps_logit_dtype():
    logits = np.zeros((1, 6, 2, 2), dtype=np.float32)
    result = loss_with_grad(logits, np.ones((1, 2, 2)))
    assert isinstance(result, LossResult)
    assert result.grad_logits.dtype == np.float32


@pytest.mark.parametrize("kind", ["dice", "ml_dice"])
@pytest.mark.parametrize("use_logcosh", [False, True])
def test_grad_check_seed_zero(kind, use_logcosh):
    assert grad_check(LossConfig(loss_kind=kind, use_logcosh=use_logcosh), GradCheckTrial(seed=0)) < 1e-5


@pytest.mark.parametrize("kind", ["dice", "ml_dice"])
def test_grad_check_over_seeds(kind):
    for seed in range(1, 5):
        assert grad_check(LossConfig(loss_kind=kind), GradCheckTrial(seed=seed)) < 1e-4


def test_grad_check_single_pixel_cases():
    trial = GradCheckTrial(shape=(1, 6, 1, 1), seed=7)
    for kind in ("dice", "ml_dice"):
        assert grad_check(LossConfig(loss_kind=kind, use_logcosh=False), trial) < 1e-3


def test_grad_check_detects_a_corrupted_gradient(monkeypatch):
    original = losses.loss_with_grad

    def corrupted(*args, **kwargs):
        result = original(*args, **kwargs)
        return LossResult(result.value, result.grad_logits + 0.1)

    monkeypatch.setattr(losses, "loss_with_grad", corrupted)
    assert grad_check(LossConfig(loss_kind="ml_dice")) > 1e-2
