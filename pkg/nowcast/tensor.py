"""
Dense tensor helpers and the seedable random source.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order. Bulk data is
float32; loss and metric accumulators work in float64.
"""

import logging
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE) -> Tensor:
    """Return ``data`` as a contiguous array of ``dtype`` (float32 by default)."""
    return np.ascontiguousarray(data, dtype=dtype)


def flat_index(shape: Sequence[int], coord: Sequence[int]) -> int:
    """Row-major flat offset of ``coord`` within ``shape``."""
    if len(shape) != len(coord):
        raise ShapeError(f"coordinate {tuple(coord)} has rank {len(coord)}, shape {tuple(shape)} has rank {len(shape)}")
    index = 0
    for size, i in zip(shape, coord):
        if not 0 <= i < size:
            raise IndexError(f"coordinate {tuple(coord)} out of bounds for shape {tuple(shape)}")
        index = index * size + i
    return index


def lerp(a: Tensor, b: Tensor, lam: float) -> Tensor:
    """
    Elementwise ``(1 - lam) * a + lam * b``.

    The result is clamped to the interval spanned by ``a`` and ``b`` so the
    endpoints are reproduced exactly and rounding never leaves the envelope.
    """
    if a.shape != b.shape:
        raise ShapeError(f"lerp operands differ in shape: {a.shape} vs {b.shape}")
    if lam == 0.0:
        return a.copy()
    if lam == 1.0:
        return b.copy()
    dtype = np.result_type(a, b)
    lam_t = dtype.type(lam)
    out = (dtype.type(1) - lam_t) * a + lam_t * b
    return np.clip(out, np.minimum(a, b), np.maximum(a, b)).astype(dtype, copy=False)


def reduce_sum(t: Tensor, axes: Iterable[int]) -> Tensor:
    """Sum over ``axes`` with float64 accumulation; the summed axes are dropped."""
    axes = tuple(sorted(set(axes)))
    for axis in axes:
        if not 0 <= axis < t.ndim:
            raise ShapeError(f"axis {axis} out of range for tensor of rank {t.ndim}")
    if not axes:
        return t.copy()
    return np.sum(t, axis=axes, dtype=np.float64).astype(t.dtype)


class RngState:
    """
    Deterministic random source seeded with a 64-bit integer.

    Backed by numpy's PCG64 bit generator. Child streams derived with
    :meth:`spawn` mix the parent seed with an integer key through
    ``numpy.random.SeedSequence`` so they do not depend on call order.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "RngState":
        """Independent stream for ``key`` derived from this state's seed."""
        child_seed = np.random.SeedSequence([self.seed, int(key)]).generate_state(1, dtype=np.uint64)[0]
        return RngState(int(child_seed))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def sample_beta(rng: RngState, a: float, b: float) -> float:
    """
    One draw from Beta(a, b).

    Beta(1, 1) is the uniform distribution and is drawn directly; other
    parameters use the ratio of two Gamma draws.
    """
    if not (a > 0 and b > 0):
        raise ValueError(f"Beta parameters must be positive, got a={a}, b={b}")
    if a == 1 and b == 1:
        return float(rng.generator.random())
    x = rng.generator.standard_gamma(a)
    y = rng.generator.standard_gamma(b)
    return float(x / (x + y))
