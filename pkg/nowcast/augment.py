"""
Training-time augmentation and image geometry.

Temporal Frame Interpolation (TFI) blends a sample with its one-step-shifted
neighbour using a shared factor lam; flips act on the two trailing (spatial)
axes; crops are centred; restoration is nearest-neighbour block replication.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .errors import ShapeError
from .tensor import RngState, Tensor, lerp, sample_beta

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    """Satellite inputs (F_in, C, H_s, W_s) paired with radar targets (T, H_r, W_r)."""

    inputs: Tensor
    targets: Tensor
    region_id: str = ""
    start_index: int = 0

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be (F_in, C, H, W) with F_in >= 1, got {self.inputs.shape}")
        if self.targets.ndim != 3 or self.targets.shape[0] < 1:
            raise ShapeError(f"targets must be (T, H, W) with T >= 1, got {self.targets.shape}")

    @property
    def input_frames(self) -> int:
        return self.inputs.shape[0]

    @property
    def output_frames(self) -> int:
        return self.targets.shape[0]


@dataclass(frozen=True)
class SampleExt:
    """
    A sample carrying one extra trailing input frame and one extra trailing target frame.

    ``extended`` is False at the end of a sequence, where the trailing frames do
    not exist; the loader then repeats the last frame and TFI is pinned to lam=0.
    """

    inputs: Tensor
    targets: Tensor
    region_id: str = ""
    start_index: int = 0
    extended: bool = True

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 2:
            raise ShapeError(f"extended inputs must be (F_in + 1, C, H, W), got {self.inputs.shape}")
        if self.targets.ndim != 3 or self.targets.shape[0] < 2:
            raise ShapeError(f"extended targets must be (T + 1, H, W), got {self.targets.shape}")

    def base(self) -> Sample:
        """The un-shifted sample (first F_in inputs, first T targets)."""
        return Sample(self.inputs[:-1].copy(), self.targets[:-1].copy(), self.region_id, self.start_index)


class FlipKind(str, Enum):
    IDENTITY = "identity"
    VFLIP = "vflip"
    HFLIP = "hflip"
    VHFLIP = "vhflip"


FLIP_KINDS = tuple(FlipKind)


def tfi(ext: SampleExt, lam: float) -> Sample:
    """Interpolate inputs and targets a fraction ``lam`` of one frame forward in time."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup factor must lie in [0, 1], got {lam}")
    inputs = lerp(ext.inputs[:-1], ext.inputs[1:], lam)
    targets = lerp(ext.targets[:-1], ext.targets[1:], lam)
    return Sample(inputs, targets, ext.region_id, ext.start_index)


def flip_spatial(array: Tensor, kind: FlipKind) -> Tensor:
    """Apply ``kind`` to the last two axes (rows, columns)."""
    kind = FlipKind(kind)
    if kind is FlipKind.VFLIP:
        array = array[..., ::-1, :]
    elif kind is FlipKind.HFLIP:
        array = array[..., :, ::-1]
    elif kind is FlipKind.VHFLIP:
        array = array[..., ::-1, ::-1]
    return np.ascontiguousarray(array)


def geometric(s: Union[Sample, SampleExt], kind: FlipKind) -> Union[Sample, SampleExt]:
    """Flip every input and target frame the same way; metadata is kept."""
    return replace(s, inputs=flip_spatial(s.inputs, kind), targets=flip_spatial(s.targets, kind))


def crop_offset(size: int, side: int) -> int:
    return (size - side) // 2


def center_crop(array: Tensor, side: int) -> Tensor:
    """Centre crop of the last two axes to ``side`` x ``side`` (floor offsets)."""
    h, w = array.shape[-2:]
    if side < 1 or side > h or side > w:
        raise ShapeError(f"cannot crop {h}x{w} image to {side}x{side}")
    top, left = crop_offset(h, side), crop_offset(w, side)
    return np.ascontiguousarray(array[..., top:top + side, left:left + side])


def crop_input(inputs: Tensor, side: int) -> Tensor:
    """Centre crop (F, C, H, W) satellite frames to (F, C, side, side)."""
    if inputs.ndim != 4:
        raise ShapeError(f"inputs must be (F, C, H, W), got {inputs.shape}")
    return center_crop(inputs, side)


def crop_target(targets: Tensor, side: int) -> Tensor:
    """Centre crop (T, H, W) radar frames to (T, side, side)."""
    if targets.ndim != 3:
        raise ShapeError(f"targets must be (T, H, W), got {targets.shape}")
    return center_crop(targets, side)


def upsample_restore(patch: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour restoration: every pixel becomes a ``factor`` x ``factor`` block."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return patch.copy()
    return np.repeat(np.repeat(patch, factor, axis=-2), factor, axis=-1)


def average_pool(array: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor`` x ``factor`` blocks of the last two axes."""
    if factor == 1:
        return array.copy()
    h, w = array.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} image is not divisible into {factor}x{factor} blocks")
    blocks = array.reshape(array.shape[:-2] + (h // factor, factor, w // factor, factor))
    return blocks.mean(axis=(-3, -1), dtype=np.float64).astype(array.dtype)


def symmetric_padding(size: int, multiple: int) -> Tuple[int, int]:
    """(before, after) zero padding that brings ``size`` up to a multiple; odd remainders go after."""
    total = (-size) % multiple
    return total // 2, total - total // 2


def pad_spatial(array: Tensor, multiple: int) -> Tensor:
    h, w = array.shape[-2:]
    pad = [(0, 0)] * (array.ndim - 2) + [symmetric_padding(h, multiple), symmetric_padding(w, multiple)]
    return np.pad(array, pad)


def augment_sample(
    ext: SampleExt,
    rng: RngState,
    tfi_enabled: bool = True,
    geometric_enabled: bool = True,
    alpha: float = 1.0,
    beta: float = 1.0,
) -> Sample:
    """
    Training augmentation for one sample: TFI with a fresh lam, then one flip
    kind chosen uniformly. Both draws are taken every call so the random
    stream does not depend on which augmentations are enabled.
    """
    lam = sample_beta(rng, alpha, beta)
    kind = FLIP_KINDS[int(rng.integers(0, len(FLIP_KINDS)))]
    if not tfi_enabled or not ext.extended:
        lam = 0.0
    sample = tfi(ext, lam)
    if geometric_enabled:
        sample = geometric(sample, kind)
    return sample


class Geometry(BaseModel):
    """
    Crop and restoration sizes.

    ``input_side``: satellite centre crop fed to the network.
    ``output_side``: centre patch of the logits that is supervised and predicted,
    in satellite pixels. ``factor``: radar pixels per satellite pixel; the
    restored prediction is ``output_side * factor`` radar pixels wide.
    """

    input_side: int = Field(32, ge=1)
    output_side: int = Field(32, ge=1)
    factor: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "Geometry":
        if self.output_side > self.input_side:
            raise ValueError(f"output patch {self.output_side} is larger than input crop {self.input_side}")
        return self

    @property
    def radar_side(self) -> int:
        return self.output_side * self.factor

    def padded_side(self, depth: int) -> int:
        return self.input_side + sum(symmetric_padding(self.input_side, 2 ** depth))

    def describe(self) -> str:
        return f"input {self.input_side}px, patch {self.output_side}px, x{self.factor} -> {self.radar_side}px"


GEOMETRY_PRESETS = {
    "desk": Geometry(input_side=32, output_side=32, factor=1),
    "geometry": Geometry(input_side=126, output_side=42, factor=6),
}
