"""
Layer primitives with hand-written backward passes.

Activations are (N, C, *spatial). Convolutions work for any number of spatial
axes (2D for the planar U-Net, 3D for the volumetric variant) with "same"
zero padding; pooling and upsampling always act on the last two axes only.
Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes that cache.
"""

import itertools
import math
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Stride-1 convolution, odd kernel, output the same spatial size as ``x``."""
    kernel = weight.shape[2:]
    nd = len(kernel)
    if x.ndim != nd + 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv input {x.shape} does not fit weight {weight.shape}")
    n, c = x.shape[:2]
    spatial = x.shape[2:]

    padded = np.pad(x, [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel])
    windows = sliding_window_view(padded, kernel, axis=tuple(range(2, 2 + nd)))
    # (N, C, *S, *K) -> (N * prod(S), C * prod(K))
    order = (0, *range(2, 2 + nd), 1, *range(2 + nd, 2 + 2 * nd))
    cols = windows.transpose(order).reshape(n * math.prod(spatial), c * math.prod(kernel))

    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    out = np.moveaxis(out.reshape(n, *spatial, weight.shape[0]), -1, 1)
    return np.ascontiguousarray(out), (x.shape, cols, weight)


def conv_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients with respect to input, weight and bias."""
    x_shape, cols, weight = cache
    kernel = weight.shape[2:]
    n, c = x_shape[:2]
    spatial = x_shape[2:]
    cout = weight.shape[0]

    dflat = np.moveaxis(dout, 1, -1).reshape(-1, cout)
    dweight = (dflat.T @ cols).reshape(weight.shape)
    dbias = dflat.sum(axis=0)
    dcols = (dflat @ weight.reshape(cout, -1)).reshape(n, *spatial, c, *kernel)

    dpadded = np.zeros((n, c) + tuple(s + k - 1 for s, k in zip(spatial, kernel)), dtype=dout.dtype)
    for offset in itertools.product(*(range(k) for k in kernel)):
        window = (slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(offset, spatial))
        dpadded[window] += np.moveaxis(dcols[(Ellipsis, *offset)], -1, 1)
    interior = (slice(None), slice(None)) + tuple(slice(k // 2, k // 2 + s) for k, s in zip(kernel, spatial))
    return dpadded[interior], dweight, dbias


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def maxpool_forward(x: np.ndarray):
    """2x2 max pooling over the last two axes; ties pick the first element of the window."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial sizes, got {h}x{w}")
    blocks = x.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    index = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0]
    return out, (x.shape, index)


def maxpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, index = cache
    *lead, h, w = shape
    dblocks = np.zeros((*lead, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dblocks, index[..., None], dout[..., None], axis=-1)
    dblocks = np.moveaxis(dblocks.reshape(*lead, h // 2, w // 2, 2, 2), -2, -3)
    return dblocks.reshape(shape)


def upsample_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2 upsampling of the last two axes."""
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def upsample_backward(dout: np.ndarray) -> np.ndarray:
    *lead, h, w = dout.shape
    return dout.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


def dropout_forward(x: np.ndarray, rate: float, generator: np.random.Generator):
    """Inverted dropout; the mask already carries the 1 / (1 - rate) scale."""
    keep = generator.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask
