"""
Desk-scale U-Net with hand-written forward and backward passes.

Layer list for depth d and base width w (w_l = w * 2**l), every conv followed
by ReLU, kernel 3 (3x3, or 3x3x3 in the ``unet3d`` variant):

    enc{l}.conv1      in_l      -> w_l        l = 0..d-1, in_0 = input channels
    enc{l}.conv2      w_l       -> w_l        then 2x2 max pool
    bottleneck.conv1  w_{d-1}   -> w_d
    bottleneck.conv2  w_d       -> w_d
    dec{l}.conv1      w_{l+1} + w_l -> w_l    after x2 upsampling and skip concat
    dec{l}.conv2      w_l       -> w_l
    head              w (x F_in for unet3d) -> out_channels, 1x1, no activation

Parameter count: sum over convs of K * c_in * c_out + c_out, K = 9 (2D) or
27 (3D), plus out_channels * (head inputs + 1).

``unet2d`` stacks the F_in input frames into channels. ``unet3d`` keeps an
explicit time axis of length F_in through the encoder/decoder (pooling is
spatial only) and folds it into channels before the head, so both variants
produce logits of the same shape.
"""

import copy
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .augment import Geometry
from .binning import DEFAULT_BINS, RainBins
from .errors import ShapeError
from .layers import (
    conv_backward,
    conv_forward,
    dropout_backward,
    dropout_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    upsample_backward,
    upsample_forward,
)
from .losses import LossConfig, loss_with_grad, loss_value
from .tensor import DTYPE, RngState

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


class UNetConfig(BaseModel):
    in_channels: int = Field(16, ge=1)
    out_channels: int = Field(24, ge=1)
    depth: int = Field(3, ge=1)
    base_width: int = Field(16, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    arch: Literal["unet2d", "unet3d"] = "unet2d"
    input_frames: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "UNetConfig":
        if self.arch == "unet3d" and self.in_channels % self.input_frames:
            raise ValueError(f"in_channels {self.in_channels} is not a multiple of input_frames {self.input_frames}")
        return self

    @property
    def kernel(self) -> Tuple[int, ...]:
        return (3, 3, 3) if self.arch == "unet3d" else (3, 3)

    def width(self, level: int) -> int:
        return self.base_width * 2 ** level


def layer_specs(cfg: UNetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Weight shape of every convolution, in initialisation order."""
    k = cfg.kernel
    first = cfg.in_channels // cfg.input_frames if cfg.arch == "unet3d" else cfg.in_channels
    specs = OrderedDict()
    c_in = first
    for level in range(cfg.depth):
        specs[f"enc{level}.conv1"] = (cfg.width(level), c_in, *k)
        specs[f"enc{level}.conv2"] = (cfg.width(level), cfg.width(level), *k)
        c_in = cfg.width(level)
    specs["bottleneck.conv1"] = (cfg.width(cfg.depth), c_in, *k)
    specs["bottleneck.conv2"] = (cfg.width(cfg.depth), cfg.width(cfg.depth), *k)
    for level in reversed(range(cfg.depth)):
        specs[f"dec{level}.conv1"] = (cfg.width(level), cfg.width(level + 1) + cfg.width(level), *k)
        specs[f"dec{level}.conv2"] = (cfg.width(level), cfg.width(level), *k)
    head_in = cfg.base_width * (cfg.input_frames if cfg.arch == "unet3d" else 1)
    specs["head"] = (cfg.out_channels, head_in, 1, 1)
    return specs


def parameter_count(cfg: UNetConfig) -> int:
    return sum(math.prod(shape) + shape[0] for shape in layer_specs(cfg).values())


@dataclass
class ModelState:
    """Parameters, AdamW moments and training progress."""

    unet: UNetConfig
    params: Params
    moment1: Params
    moment2: Params
    lr: float = 1e-4
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    geometry: Optional[Geometry] = None
    output_frames: int = 1

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelState":
        clone = self.copy()
        for buffers in (clone.params, clone.moment1, clone.moment2):
            for key in buffers:
                buffers[key] = buffers[key].astype(dtype)
        return clone


def init(cfg: UNetConfig, rng: RngState, lr: float = 1e-4) -> ModelState:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    params: Params = OrderedDict()
    for name, shape in layer_specs(cfg).items():
        fan_in = math.prod(shape[1:])
        bound = math.sqrt(6.0 / fan_in)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, shape).astype(DTYPE)
        params[f"{name}.bias"] = np.zeros(shape[0], dtype=DTYPE)
    zeros = lambda: OrderedDict((k, np.zeros_like(v)) for k, v in params.items())  # noqa: E731
    return ModelState(unet=cfg, params=params, moment1=zeros(), moment2=zeros(), lr=lr)


def _conv(params: Params, name: str, x: np.ndarray):
    return conv_forward(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _block_forward(params, name, x, cfg: UNetConfig, train_mode: bool, rng: Optional[RngState]):
    h, c1 = _conv(params, f"{name}.conv1", x)
    h, r1 = relu_forward(h)
    h, c2 = _conv(params, f"{name}.conv2", h)
    h, r2 = relu_forward(h)
    drop = None
    if train_mode and cfg.dropout > 0:
        if rng is None:
            raise ValueError("dropout in train mode needs an RngState")
        h, drop = dropout_forward(h, cfg.dropout, rng.generator)
    return h, (c1, r1, c2, r2, drop)


def _block_backward(grads: Params, name: str, dout: np.ndarray, cache) -> np.ndarray:
    c1, r1, c2, r2, drop = cache
    if drop is not None:
        dout = dropout_backward(dout, drop)
    dh = relu_backward(dout, r2)
    dh, grads[f"{name}.conv2.weight"], grads[f"{name}.conv2.bias"] = conv_backward(dh, c2)
    dh = relu_backward(dh, r1)
    dh, grads[f"{name}.conv1.weight"], grads[f"{name}.conv1.bias"] = conv_backward(dh, c1)
    return dh


def forward(state: ModelState, batch_inputs: np.ndarray, train_mode: bool = False, rng: Optional[RngState] = None):
    """
    Logits (N, out_channels, h, w) for inputs (N, in_channels, h, w), plus the
    activation cache needed by :func:`backward`.
    """
    cfg = state.unet
    params = state.params
    if batch_inputs.ndim != 4 or batch_inputs.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected inputs (N, {cfg.in_channels}, h, w), got {batch_inputs.shape}")
    n, _, h, w = batch_inputs.shape
    multiple = 2 ** cfg.depth
    if h % multiple or w % multiple:
        raise ShapeError(f"spatial size {h}x{w} must be divisible by 2**depth = {multiple}")

    x = batch_inputs.astype(params["head.weight"].dtype, copy=False)
    if cfg.arch == "unet3d":
        x = x.reshape(n, cfg.input_frames, cfg.in_channels // cfg.input_frames, h, w).transpose(0, 2, 1, 3, 4)

    cache = {"input_shape": batch_inputs.shape}
    skips = []
    for level in range(cfg.depth):
        x, cache[f"enc{level}"] = _block_forward(params, f"enc{level}", x, cfg, train_mode, rng)
        skips.append(x)
        x, cache[f"pool{level}"] = maxpool_forward(x)
    x, cache["bottleneck"] = _block_forward(params, "bottleneck", x, cfg, train_mode, rng)
    for level in reversed(range(cfg.depth)):
        up = upsample_forward(x)
        cache[f"split{level}"] = up.shape[1]
        x, cache[f"dec{level}"] = _block_forward(
            params, f"dec{level}", np.concatenate([up, skips[level]], axis=1), cfg, train_mode, rng
        )

    if cfg.arch == "unet3d":
        cache["volume_shape"] = x.shape
        x = x.reshape(n, -1, h, w)
    logits, cache["head"] = _conv(params, "head", x)
    cache["logits_shape"] = logits.shape
    return logits, cache


def backward(state: ModelState, cache, grad_logits: np.ndarray) -> Params:
    """Parameter gradients for the upstream gradient ``grad_logits``."""
    cfg = state.unet
    if grad_logits.shape != cache["logits_shape"]:
        raise ShapeError(f"gradient shape {grad_logits.shape} does not match logits {cache['logits_shape']}")

    grads: Params = {}
    dx, grads["head.weight"], grads["head.bias"] = conv_backward(grad_logits, cache["head"])
    if cfg.arch == "unet3d":
        dx = dx.reshape(cache["volume_shape"])

    skip_grads = {}
    for level in range(cfg.depth):
        dx = _block_backward(grads, f"dec{level}", dx, cache[f"dec{level}"])
        split = cache[f"split{level}"]
        skip_grads[level] = dx[:, split:]
        dx = upsample_backward(dx[:, :split])
    dx = _block_backward(grads, "bottleneck", dx, cache["bottleneck"])
    for level in reversed(range(cfg.depth)):
        dx = maxpool_backward(dx, cache[f"pool{level}"]) + skip_grads[level]
        dx = _block_backward(grads, f"enc{level}", dx, cache[f"enc{level}"])

    return OrderedDict((key, grads[key]) for key in state.params)


def logits_to_bins(logits: np.ndarray, n_bins: int = 6) -> np.ndarray:
    """(N, T * bins, h, w) -> (N, T, bins, h, w); channel t * bins + k is bin k of step t."""
    n, channels, h, w = logits.shape
    if channels % n_bins:
        raise ShapeError(f"{channels} logit channels is not a multiple of {n_bins} bins")
    return logits.reshape(n, channels // n_bins, n_bins, h, w)


def bins_to_logits(binned: np.ndarray) -> np.ndarray:
    n, t, k, h, w = binned.shape
    return binned.reshape(n, t * k, h, w)


@dataclass(frozen=True)
class NetworkCheckTrial:
    """Tiny end-to-end problem for checking :func:`backward` against finite differences."""

    seed: int = 0
    batch: int = 2
    frames: int = 2
    bands: int = 2
    output_frames: int = 2
    side: int = 8
    depth: int = 1
    base_width: int = 2
    samples: int = 50
    step: float = 1e-3
    arch: str = "unet2d"


def network_grad_check(
    trial: NetworkCheckTrial = NetworkCheckTrial(),
    dtype=np.float32,
    loss_cfg: LossConfig = LossConfig(loss_kind="ml_dice"),
    bins: RainBins = DEFAULT_BINS,
) -> float:
    """
    Max relative error |analytic - numeric| / max(1, |numeric|) over randomly
    sampled weights, for the loss of a tiny U-Net with central differences.
    """
    rng = RngState(trial.seed)
    cfg = UNetConfig(
        in_channels=trial.frames * trial.bands,
        out_channels=trial.output_frames * bins.n_bins,
        depth=trial.depth,
        base_width=trial.base_width,
        arch=trial.arch,
        input_frames=trial.frames,
    )
    state = init(cfg, rng).astype(dtype)
    x = rng.normal(0.0, 1.0, (trial.batch, cfg.in_channels, trial.side, trial.side)).astype(dtype)
    rates = rng.generator.exponential(5.0, (trial.batch, trial.output_frames, trial.side, trial.side))

    def objective() -> float:
        logits, _ = forward(state, x)
        return loss_value(logits_to_bins(logits, bins.n_bins), rates, bins, loss_cfg)

    logits, cache = forward(state, x)
    result = loss_with_grad(logits_to_bins(logits, bins.n_bins), rates, bins, loss_cfg)
    grads = backward(state, cache, bins_to_logits(result.grad_logits))

    keys = [k for k in state.params if k.endswith(".weight")]
    worst = 0.0
    for _ in range(trial.samples):
        key = keys[int(rng.integers(0, len(keys)))]
        index = int(rng.integers(0, state.params[key].size))
        tensor = state.params[key]
        original = tensor.flat[index]
        tensor.flat[index] = original + trial.step
        upper = objective()
        tensor.flat[index] = original - trial.step
        lower = objective()
        tensor.flat[index] = original
        numeric = (upper - lower) / (2.0 * trial.step)
        worst = max(worst, abs(float(grads[key].flat[index]) - numeric) / max(1.0, abs(numeric)))
    return worst
