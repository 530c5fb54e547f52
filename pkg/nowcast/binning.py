"""
Ordinal rainfall bins.

Rates (mm/h) are split by the thresholds s = (0.2, 1, 5, 10, 15) into six
half-open bins [0, 0.2), [0.2, 1), [1, 5), [5, 10), [10, 15), [15, inf).
Probability fields keep the bin axis third from the end: (..., 6, H, W).
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Tensor

BIN_AXIS = -3

DEFAULT_THRESHOLDS: Tuple[float, ...] = (0.2, 1.0, 5.0, 10.0, 15.0)
DEFAULT_REPRESENTATIVES: Tuple[float, ...] = (0.1, 0.6, 3.0, 7.5, 12.5, 20.0)


@dataclass(frozen=True)
class RainBins:
    """Thresholds and the rate emitted for each bin at decode time."""

    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    representatives: Tuple[float, ...] = DEFAULT_REPRESENTATIVES

    def __post_init__(self):
        thresholds = tuple(float(s) for s in self.thresholds)
        representatives = tuple(float(r) for r in self.representatives)
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "representatives", representatives)

        if not thresholds or thresholds[0] <= 0:
            raise ValueError(f"thresholds must be positive, got {thresholds}")
        if any(lo >= hi for lo, hi in zip(thresholds, thresholds[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {thresholds}")
        if len(representatives) != len(thresholds) + 1:
            raise ValueError(
                f"need {len(thresholds) + 1} representatives for {len(thresholds)} thresholds, "
                f"got {len(representatives)}"
            )
        # Above the lower edge for i > 0: a rate equal to a threshold is not an exceedance of it.
        for i, rep in enumerate(representatives):
            lo, hi = self.bin_bounds(i)
            if not (lo <= rep < hi if i == 0 else lo < rep < hi):
                raise ValueError(f"representative {rep} must lie strictly inside bin {i} [{lo}, {hi})")

    @property
    def n_bins(self) -> int:
        return len(self.thresholds) + 1

    @property
    def n_thresholds(self) -> int:
        return len(self.thresholds)

    def bin_bounds(self, i: int) -> Tuple[float, float]:
        """Half-open interval [lo, hi) covered by bin ``i``."""
        edges = (0.0,) + self.thresholds + (math.inf,)
        return edges[i], edges[i + 1]

    def with_representatives(self, representatives) -> "RainBins":
        return RainBins(self.thresholds, tuple(representatives))


DEFAULT_BINS = RainBins()


def exceeds(rates, threshold: float) -> np.ndarray:
    """
    Event predicate shared by the ML-Dice loss and the CSI metrics.

    A rate is an exceedance of ``threshold`` when strictly greater than it.
    """
    return np.asarray(rates) > threshold


def quantize(rate: float, bins: RainBins = DEFAULT_BINS) -> int:
    """Bin index of a single rate; threshold-equal rates go to the upper bin."""
    if not math.isfinite(rate) or rate < 0:
        raise ValueError(f"rainfall rate must be finite and non-negative, got {rate}")
    return int(np.searchsorted(bins.thresholds, rate, side="right"))


def quantize_field(rates: Tensor, bins: RainBins = DEFAULT_BINS) -> np.ndarray:
    """Vectorised :func:`quantize` returning an integer array of bin indices."""
    # Integer rates are promoted; casting the thresholds down would truncate 0.2 to 0.
    rates = np.asarray(rates)
    rates = rates.astype(np.result_type(rates.dtype, np.float32), copy=False)
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise ValueError("rainfall rates must be finite and non-negative")
    return np.searchsorted(np.asarray(bins.thresholds, dtype=rates.dtype), rates, side="right")


def onehot_targets(truth: Tensor, bins: RainBins = DEFAULT_BINS) -> Tensor:
    """(..., H, W) rates to a (..., 6, H, W) one-hot bin indicator."""
    if truth.ndim < 2:
        raise ShapeError(f"truth must have at least 2 spatial axes, got shape {truth.shape}")
    index = quantize_field(truth, bins)
    channels = np.arange(bins.n_bins).reshape((bins.n_bins, 1, 1))
    return (index[..., None, :, :] == channels).astype(DTYPE)


def exceedance(probs: Tensor, index: int) -> Tensor:
    """Probability that the rate exceeds threshold ``index``: the sum of the bins above it."""
    n_thresholds = probs.shape[BIN_AXIS] - 1
    if not 0 <= index < n_thresholds:
        raise ValueError(f"threshold index must be in 0..{n_thresholds - 1}, got {index}")
    return probs[..., index + 1:, :, :].sum(axis=BIN_AXIS)


def exceedance_all(probs: Tensor) -> Tensor:
    """
    Exceedance probabilities for every threshold at once.

    Returns (..., 5, H, W); channel i holds the tail sum over bins i+1..5.
    """
    tail = np.flip(np.cumsum(np.flip(probs, axis=BIN_AXIS), axis=BIN_AXIS), axis=BIN_AXIS)
    return np.ascontiguousarray(tail[..., 1:, :, :])


def decode(probs: Tensor, bins: RainBins = DEFAULT_BINS) -> Tensor:
    """
    Rates from bin probabilities: the representative of the most likely bin.

    ``argmax`` returns the first maximum, so ties go to the lower bin.
    """
    if probs.shape[BIN_AXIS] != bins.n_bins:
        raise ShapeError(f"expected {bins.n_bins} bin channels at axis {BIN_AXIS}, got shape {probs.shape}")
    winner = np.argmax(probs, axis=BIN_AXIS)
    return np.asarray(bins.representatives, dtype=DTYPE)[winner]
