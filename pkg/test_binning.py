#!/usr/bin/env python3
"""
Tests for rainfall bins: quantisation, one-hot targets, exceedance and decoding.
"""

import sys
import os

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from nowcast.binning import (
    DEFAULT_BINS,
    RainBins,
    decode,
    exceedance,
    exceedance_all,
    onehot_targets,
    quantize,
    quantize_field,
)
from nowcast.errors import ShapeError


def _onehot(index, n_bins=6):
    probs = np.zeros((1, n_bins, 1, 1))
    probs[0, index] = 1.0
    return probs


@pytest.mark.parametrize(
    "rate,expected",
    [(0.0, 0), (0.19, 0), (0.2, 1), (0.5, 1), (1.0, 2), (3.0, 2), (7.0, 3), (14.99, 4), (15.0, 5), (300.0, 5)],
)
def test_quantize_half_open_bins(rate, expected):
    assert quantize(rate) == expected


@pytest.mark.parametrize("rate", [-0.1, float("nan"), float("inf")])
def test_quantize_rejects_invalid_rates(rate):
    with pytest.raises(ValueError):
        quantize(rate)


def test_representatives_round_trip():
    for i, rep in enumerate(DEFAULT_BINS.representatives):
        assert quantize(rep) == i


def test_quantize_field_matches_scalar():
    rates = np.array([[0.0, 0.2, 1.0], [4.9, 10.0, 16.0]], dtype=np.float32)
    expected = [[quantize(float(r)) for r in row] for row in rates]
    assert quantize_field(rates).tolist() == expected


def test_quantize_field_promotes_integer_rates():
    rates = np.array([[0, 3, 20]], dtype=np.int64)
    assert quantize_field(rates).tolist() == [[0, 2, 5]]
    assert quantize_field(rates.astype(np.int16)).tolist() == [[0, 2, 5]]
    assert quantize_field(np.zeros((2, 2), dtype=np.int32)).sum() == 0


def test_onehot_targets():
    single = onehot_targets(np.array([[[3.0]]]))
    assert single.shape == (1, 6, 1, 1)
    assert single[0, :, 0, 0].tolist() == [0, 0, 1, 0, 0, 0]

    zeros = onehot_targets(np.zeros((2, 3, 3)))
    assert np.all(zeros[:, 0] == 1) and np.all(zeros[:, 1:] == 0)

    pair = onehot_targets(np.array([[[0.5, 7.0]]]))
    assert pair[0, 1, 0, 0] == 1 and pair[0, 3, 0, 1] == 1
    assert np.all(pair.sum(axis=1) == 1)


def test_exceedance_of_onehot():
    assert [exceedance(_onehot(4), i).item() for i in range(5)] == [1, 1, 1, 1, 0]
    assert [exceedance(_onehot(0), i).item() for i in range(5)] == [0, 0, 0, 0, 0]


def test_exceedance_of_uniform():
    uniform = np.full((1, 6, 1, 1), 1 / 6)
    assert exceedance(uniform, 0).item() == pytest.approx(5 / 6)


def test_exceedance_all_matches_single_and_is_monotone():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(6), size=(2, 3, 3)).transpose(0, 3, 1, 2)
    tail = exceedance_all(probs)
    assert tail.shape == (2, 5, 3, 3)
    for i in range(5):
        assert np.allclose(tail[:, i], exceedance(probs, i))
    assert np.all(np.diff(tail, axis=1) <= 1e-12)


def test_exceedance_index_range():
    with pytest.raises(ValueError):
        exceedance(_onehot(0), 5)


def test_decode():
    assert decode(_onehot(2)).item() == pytest.approx(3.0)
    assert decode(_onehot(5)).item() == pytest.approx(20.0)
    probs = np.array([0.4, 0.3, 0.1, 0.1, 0.05, 0.05]).reshape(1, 6, 1, 1)
    assert decode(probs).item() == pytest.approx(0.1)


def test_decode_ties_go_to_lower_bin():
    assert np.allclose(decode(np.full((1, 6, 2, 2), 1 / 6)), 0.1)


def test_decode_requires_six_bins():
    with pytest.raises(ShapeError):
        decode(np.zeros((1, 5, 2, 2)))


@pytest.mark.parametrize(
    "thresholds,representatives",
    [
        ((0.2, 1.0, 5.0, 10.0, 15.0), (0.1, 0.6, 3.0, 7.5, 12.5)),
        ((0.2, 1.0, 1.0, 10.0, 15.0), (0.1, 0.6, 3.0, 7.5, 12.5, 20.0)),
        ((0.2, 1.0, 5.0, 10.0, 15.0), (0.1, 0.6, 6.0, 7.5, 12.5, 20.0)),
        ((0.2, 1.0, 5.0, 10.0, 15.0), (0.1, 0.2, 3.0, 7.5, 12.5, 20.0)),
    ],
)
def test_rain_bins_validation(thresholds, representatives):
    with pytest.raises(ValueError):
        RainBins(thresholds, representatives)


def test_bin_bounds():
    assert DEFAULT_BINS.bin_bounds(0) == (0.0, 0.2)
    assert DEFAULT_BINS.bin_bounds(5)[0] == 15.0
    assert DEFAULT_BINS.n_bins == 6 and DEFAULT_BINS.n_thresholds == 5
