"""
Bin losses with analytic gradients.

The network emits logits of shape (..., 6, H, W). A softmax over the bin axis
gives per-pixel bin probabilities; the vanilla Dice loss scores each bin as a
class, the Multi-Level Dice (ML-Dice) loss scores each threshold on the tail
(exceedance) probabilities so that errors closer to the truth cost less.
All leading axes are pooled into one pixel population. Arithmetic is float64.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .binning import BIN_AXIS, DEFAULT_BINS, RainBins, exceedance_all, exceeds, onehot_targets
from .errors import ShapeError
from .tensor import RngState, Tensor

logger = logging.getLogger(__name__)


class LossConfig(BaseModel):
    """Loss selection and Dice smoothing."""

    epsilon: float = Field(1e-6, gt=0)
    # 2 is the usual Dice coefficient; 1 reproduces the formula as printed.
    numerator_factor: Literal[1, 2] = 2
    use_logcosh: bool = True
    loss_kind: Literal["dice", "ml_dice"] = "ml_dice"


@dataclass
class LossResult:
    value: float
    grad_logits: Tensor


def softmax_bins(logits: Tensor) -> Tensor:
    """Numerically stable softmax over the bin axis; keeps the input dtype."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    z = logits.astype(np.float64)
    z = z - z.max(axis=BIN_AXIS, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=BIN_AXIS, keepdims=True)
    return probs.astype(np.result_type(logits.dtype, np.float32))


def _channels_first(array: Tensor) -> np.ndarray:
    """(..., K, H, W) -> (K, pixels) in float64."""
    moved = np.moveaxis(np.asarray(array, dtype=np.float64), BIN_AXIS, 0)
    return moved.reshape(moved.shape[0], -1)


def _from_channels_first(grad: np.ndarray, like_shape: Tuple[int, ...]) -> np.ndarray:
    k = like_shape[BIN_AXIS]
    moved_shape = (k,) + like_shape[:BIN_AXIS] + like_shape[BIN_AXIS + 1:]
    return np.moveaxis(grad.reshape(moved_shape), 0, BIN_AXIS)


def _soft_dice(truth: np.ndarray, pred: np.ndarray, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """
    Mean-over-channels soft Dice loss and its gradient with respect to ``pred``.

    truth, pred: (K, pixels). Channel coefficient is
    (factor * sum(t p) + eps) / (sum(t) + sum(p) + eps); a channel that is
    empty in both truth and prediction scores 1.
    """
    k = truth.shape[0]
    numerator = cfg.numerator_factor * np.sum(truth * pred, axis=1) + cfg.epsilon
    denominator = np.sum(truth, axis=1) + np.sum(pred, axis=1) + cfg.epsilon
    coefficient = numerator / denominator
    loss = 1.0 - coefficient.mean()
    grad = -(cfg.numerator_factor * truth / denominator[:, None] - (numerator / denominator ** 2)[:, None]) / k
    return float(loss), grad


def dice_loss(probs: Tensor, onehot: Tensor, cfg: LossConfig = LossConfig()) -> float:
    """Multi-class soft Dice over the six bins."""
    if probs.shape != onehot.shape:
        raise ShapeError(f"probabilities {probs.shape} and one-hot targets {onehot.shape} differ in shape")
    loss, _ = _soft_dice(_channels_first(onehot), _channels_first(probs), cfg)
    return loss


def _exceedance_targets(truth_rates: Tensor, bins: RainBins) -> np.ndarray:
    """(..., H, W) rates -> (..., 5, H, W) strict exceedance indicators."""
    planes = [exceeds(truth_rates, s) for s in bins.thresholds]
    return np.stack(planes, axis=BIN_AXIS).astype(np.float64)


def _check_truth(probs: Tensor, truth_rates: Tensor):
    expected = probs.shape[:BIN_AXIS] + probs.shape[BIN_AXIS + 1:]
    if truth_rates.shape != expected:
        raise ShapeError(f"truth rates {truth_rates.shape} do not match probabilities {probs.shape}; expected {expected}")
    if np.any(truth_rates < 0):
        raise ValueError("rainfall rates must be non-negative")


def ml_dice_loss(
    probs: Tensor,
    truth_rates: Tensor,
    bins: RainBins = DEFAULT_BINS,
    cfg: LossConfig = LossConfig(),
) -> float:
    """Soft Dice averaged over the five exceedance events y > s_i."""
    _check_truth(probs, truth_rates)
    tail = exceedance_all(np.asarray(probs, dtype=np.float64))
    loss, _ = _soft_dice(_channels_first(_exceedance_targets(truth_rates, bins)), _channels_first(tail), cfg)
    return loss


def logcosh_wrap(raw: float) -> float:
    """ln(cosh(raw)) evaluated without overflow."""
    x = abs(raw)
    return float(x + np.log1p(np.exp(-2.0 * x)) - np.log(2.0))


def loss_with_grad(
    logits: Tensor,
    truth_rates: Tensor,
    bins: RainBins = DEFAULT_BINS,
    cfg: LossConfig = LossConfig(),
) -> LossResult:
    """
    Loss value and its exact gradient with respect to ``logits``.

    Chain: softmax -> (dice | ml_dice) -> optional logcosh. The returned
    gradient has the dtype of ``logits``.
    """
    probs = softmax_bins(logits.astype(np.float64))
    _check_truth(probs, truth_rates)

    if cfg.loss_kind == "dice":
        truth = _channels_first(onehot_targets(truth_rates, bins))
        raw, grad_flat = _soft_dice(truth, _channels_first(probs), cfg)
        grad_probs = _from_channels_first(grad_flat, probs.shape)
    else:
        tail = exceedance_all(probs)
        truth = _channels_first(_exceedance_targets(truth_rates, bins))
        raw, grad_flat = _soft_dice(truth, _channels_first(tail), cfg)
        grad_tail = _from_channels_first(grad_flat, tail.shape)
        # d tail_i / d p_m = 1 for m > i, so bin m collects the tail grads of thresholds 0..m-1.
        cumulative = np.cumsum(grad_tail, axis=BIN_AXIS)
        zeros = np.zeros_like(cumulative[..., :1, :, :])
        grad_probs = np.concatenate([zeros, cumulative], axis=BIN_AXIS)

    value = raw
    if cfg.use_logcosh:
        value = logcosh_wrap(raw)
        grad_probs = grad_probs * np.tanh(raw)

    weighted = np.sum(grad_probs * probs, axis=BIN_AXIS, keepdims=True)
    grad_logits = probs * (grad_probs - weighted)
    return LossResult(value=float(value), grad_logits=grad_logits.astype(logits.dtype))


def loss_value(
    logits: Tensor,
    truth_rates: Tensor,
    bins: RainBins = DEFAULT_BINS,
    cfg: LossConfig = LossConfig(),
) -> float:
    """Forward-only loss, used by finite differences."""
    probs = softmax_bins(np.asarray(logits, dtype=np.float64))
    if cfg.loss_kind == "dice":
        raw = dice_loss(probs, onehot_targets(truth_rates, bins), cfg)
    else:
        raw = ml_dice_loss(probs, truth_rates, bins, cfg)
    return logcosh_wrap(raw) if cfg.use_logcosh else raw


@dataclass(frozen=True)
class GradCheckTrial:
    """Random problem for a finite-difference check."""

    shape: Tuple[int, ...] = (2, 6, 4, 4)
    seed: int = 0
    step: float = 1e-3
    logit_scale: float = 1.0
    rate_scale: float = 5.0


def random_problem(trial: GradCheckTrial, bins: RainBins = DEFAULT_BINS) -> Tuple[np.ndarray, np.ndarray]:
    """Logits and truth rates for ``trial``; rates are exponential so every bin is likely populated."""
    rng = RngState(trial.seed)
    logits = rng.normal(0.0, trial.logit_scale, trial.shape).astype(np.float64)
    truth_shape = trial.shape[:BIN_AXIS] + trial.shape[BIN_AXIS + 1:]
    rates = rng.generator.exponential(trial.rate_scale, truth_shape).astype(np.float64)
    return logits, rates


def grad_check(
    cfg: LossConfig,
    trial: GradCheckTrial = GradCheckTrial(),
    bins: RainBins = DEFAULT_BINS,
) -> float:
    """
    Max over coordinates of |analytic - numeric| / max(1, |numeric|), using
    central differences in float64.
    """
    logits, rates = random_problem(trial, bins)
    analytic = loss_with_grad(logits, rates, bins, cfg).grad_logits

    worst = 0.0
    shifted = logits.copy()
    for i in range(shifted.size):
        original = shifted.flat[i]
        shifted.flat[i] = original + trial.step
        upper = loss_value(shifted, rates, bins, cfg)
        shifted.flat[i] = original - trial.step
        lower = loss_value(shifted, rates, bins, cfg)
        shifted.flat[i] = original
        numeric = (upper - lower) / (2.0 * trial.step)
        worst = max(worst, abs(analytic.flat[i] - numeric) / max(1.0, abs(numeric)))
    logger.debug("grad_check %s logcosh=%s: max relative error %.3e", cfg.loss_kind, cfg.use_logcosh, worst)
    return worst
