"""
Training and inference pipelines.

Inference for one sample:
    crop_input -> stack frames into channels -> zero-pad to a multiple of
    2**depth -> U-Net (eval mode) -> drop the pad ring and keep the central
    output patch -> (T, 6, h, w) softmax -> decode -> upsample_restore.

Training targets are built the same way in reverse: the radar frames covered
by the output patch are average-pooled by ``factor`` onto the patch grid and
the loss is taken on the patch logits.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .augment import (
    Geometry,
    Sample,
    SampleExt,
    augment_sample,
    average_pool,
    crop_input,
    crop_offset,
    crop_target,
    pad_spatial,
    symmetric_padding,
    upsample_restore,
)
from .binning import DEFAULT_BINS, RainBins, decode
from .dataio import load_split
from .errors import DatasetError, GeometryError, ShapeError
from .losses import LossConfig, loss_with_grad, loss_value, softmax_bins
from .metrics import ConfusionCounts, ScoreReport, accumulate, finalize
from .model import ModelState, UNetConfig, backward, bins_to_logits, forward, init, logits_to_bins
from .optimizer import adamw_step
from .tensor import RngState

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "val_mcsi", "val_mf1"]


class TrainConfig(BaseModel):
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.02, ge=0)
    batch_size: int = Field(8, ge=1)
    max_epochs: int = Field(90, ge=1)
    lr_decay_factor: float = Field(0.9, gt=0, lt=1)
    early_stop_patience: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    loss: LossConfig = LossConfig()
    tfi_enabled: bool = True
    geometric_enabled: bool = True
    tfi_alpha: float = Field(1.0, gt=0)
    tfi_beta: float = Field(1.0, gt=0)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_mcsi: float
    val_mf1: float


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index) -> EpochRecord:
        return self.records[index]

    def record_for(self, epoch: int) -> Optional[EpochRecord]:
        """The record of epoch number ``epoch``; None for epoch 0 (no epoch improved on the initial state)."""
        for record in self.records:
            if record.epoch == epoch:
                return record
        return None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=HISTORY_COLUMNS)

    def write_tsv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, sep="\t", index=False, lineterminator="\n")

    @classmethod
    def read_tsv(cls, path: Union[str, Path]) -> "TrainingHistory":
        frame = pd.read_csv(path, sep="\t")
        return cls([EpochRecord(**row) for row in frame.to_dict(orient="records")])


def unet_config_for(input_frames: int, bands: int, output_frames: int, bins: RainBins = DEFAULT_BINS, **overrides) -> UNetConfig:
    """U-Net whose input stacks ``input_frames`` x ``bands`` channels and whose head emits T x 6 logits."""
    return UNetConfig(
        in_channels=input_frames * bands,
        out_channels=output_frames * bins.n_bins,
        input_frames=input_frames,
        **overrides,
    )


def prepare_inputs(inputs: np.ndarray, geometry: Geometry, depth: int) -> np.ndarray:
    """(F, C, H, W) satellite frames -> (F * C, P, P) network input."""
    h, w = inputs.shape[-2:]
    if h < geometry.input_side or w < geometry.input_side:
        raise GeometryError(f"satellite frames are {h}x{w}, geometry needs at least {geometry.describe()}")
    cropped = crop_input(inputs, geometry.input_side)
    stacked = cropped.reshape(-1, geometry.input_side, geometry.input_side)
    return pad_spatial(stacked, 2 ** depth)


def prepare_targets(targets: np.ndarray, geometry: Geometry) -> np.ndarray:
    """(T, H_r, W_r) radar frames -> (T, h, w) rates on the output patch grid."""
    h, w = targets.shape[-2:]
    if h < geometry.radar_side or w < geometry.radar_side:
        raise GeometryError(f"radar frames are {h}x{w}, geometry needs {geometry.radar_side}px ({geometry.describe()})")
    return average_pool(crop_target(targets, geometry.radar_side), geometry.factor)


def _patch_window(geometry: Geometry, depth: int) -> Tuple[slice, slice]:
    before, _ = symmetric_padding(geometry.input_side, 2 ** depth)
    start = before + crop_offset(geometry.input_side, geometry.output_side)
    window = slice(start, start + geometry.output_side)
    return window, window


def patch_logits(logits: np.ndarray, geometry: Geometry, depth: int, n_bins: int = 6) -> np.ndarray:
    """(N, T * 6, P, P) logits -> (N, T, 6, h, w) over the output patch."""
    rows, cols = _patch_window(geometry, depth)
    return logits_to_bins(np.ascontiguousarray(logits[:, :, rows, cols]), n_bins)


def embed_patch_grad(grad_patch: np.ndarray, logits_shape, geometry: Geometry, depth: int) -> np.ndarray:
    """Inverse of :func:`patch_logits` for gradients: zeros outside the patch."""
    rows, cols = _patch_window(geometry, depth)
    grad = np.zeros(logits_shape, dtype=grad_patch.dtype)
    grad[:, :, rows, cols] = bins_to_logits(grad_patch)
    return grad


def _check_consistent(samples: Sequence[Union[Sample, SampleExt]], what: str):
    if not samples:
        raise DatasetError(f"{what} set is empty")
    first = samples[0]
    for s in samples[1:]:
        if s.inputs.shape != first.inputs.shape or s.targets.shape != first.targets.shape:
            raise ShapeError(
                f"{what} sample {s.region_id}/{s.start_index} has shapes {s.inputs.shape}/{s.targets.shape}, "
                f"expected {first.inputs.shape}/{first.targets.shape}"
            )


def _batches(indices: Sequence[int], batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def predict_patch_probs(state: ModelState, batch_inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and their bin probabilities over the output patch."""
    logits, _ = forward(state, batch_inputs, train_mode=False)
    patch = patch_logits(logits, state.geometry, state.unet.depth)
    return patch, softmax_bins(patch)


def predict(state: ModelState, inputs: np.ndarray, bins: RainBins = DEFAULT_BINS) -> np.ndarray:
    """Rates (T, H_r, W_r) for one sample's satellite frames (F_in, C, H_s, W_s)."""
    geometry = state.geometry
    if geometry is None:
        raise GeometryError("model state carries no training geometry")
    cfg = state.unet
    expected_channels = cfg.in_channels
    if inputs.ndim != 4 or inputs.shape[0] * inputs.shape[1] != expected_channels:
        raise GeometryError(
            f"inputs {inputs.shape} do not match the checkpoint ({cfg.input_frames} frames, "
            f"{expected_channels} stacked channels)"
        )
    x = prepare_inputs(inputs, geometry, cfg.depth)[None]
    _, probs = predict_patch_probs(state, x)
    return upsample_restore(decode(probs[0], bins), geometry.factor)


class Trainer:
    """
    Fits a U-Net with AdamW, multiplying the learning rate by
    ``lr_decay_factor`` whenever the clean validation loss rises above the
    previous epoch's, and stopping after ``early_stop_patience`` epochs
    without a new best. The best-validation state is returned.
    """

    def __init__(self, ucfg: UNetConfig, tcfg: TrainConfig, geometry: Geometry, bins: RainBins = DEFAULT_BINS):
        self.ucfg = ucfg
        self.tcfg = tcfg
        self.geometry = geometry
        self.bins = bins
        self.output_frames = ucfg.out_channels // bins.n_bins

    def _inputs(self, samples: Sequence[Sample]) -> np.ndarray:
        return np.stack([prepare_inputs(s.inputs, self.geometry, self.ucfg.depth) for s in samples])

    def _targets(self, samples: Sequence[Sample]) -> np.ndarray:
        return np.stack([prepare_targets(s.targets, self.geometry) for s in samples])

    def _check_geometry(self, samples: Sequence[SampleExt]):
        s = samples[0]
        frames, bands = s.inputs.shape[0] - 1, s.inputs.shape[1]
        if frames * bands != self.ucfg.in_channels or s.targets.shape[0] - 1 != self.output_frames:
            raise ShapeError(
                f"samples carry {frames} frames x {bands} bands -> {s.targets.shape[0] - 1} steps, "
                f"model expects {self.ucfg.in_channels} input channels -> {self.output_frames} steps"
            )

    def train_epoch(self, state: ModelState, train: Sequence[SampleExt], rng: RngState) -> float:
        order = rng.permutation(len(train))
        losses, weights = [], []
        for batch in _batches(order, self.tcfg.batch_size):
            samples = [
                augment_sample(
                    train[i],
                    rng,
                    tfi_enabled=self.tcfg.tfi_enabled,
                    geometric_enabled=self.tcfg.geometric_enabled,
                    alpha=self.tcfg.tfi_alpha,
                    beta=self.tcfg.tfi_beta,
                )
                for i in batch
            ]
            x, y = self._inputs(samples), self._targets(samples)
            logits, cache = forward(state, x, train_mode=True, rng=rng)
            result = loss_with_grad(patch_logits(logits, self.geometry, self.ucfg.depth), y, self.bins, self.tcfg.loss)
            grads = backward(state, cache, embed_patch_grad(result.grad_logits, logits.shape, self.geometry, self.ucfg.depth))
            adamw_step(state, grads, state.lr, self.tcfg.weight_decay)
            losses.append(result.value)
            weights.append(len(batch))
        return float(np.average(losses, weights=weights))

    def validate(self, state: ModelState, samples: Sequence[Union[Sample, SampleExt]]) -> Tuple[float, ScoreReport]:
        """Clean (un-augmented) loss and scores of the full inference path."""
        samples = [s.base() if isinstance(s, SampleExt) else s for s in samples]
        losses, weights = [], []
        counts = ConfusionCounts.zeros(self.bins.n_thresholds)
        for batch in _batches(list(range(len(samples))), self.tcfg.batch_size):
            chosen = [samples[i] for i in batch]
            patch, probs = predict_patch_probs(state, self._inputs(chosen))
            losses.append(loss_value(patch, self._targets(chosen), self.bins, self.tcfg.loss))
            weights.append(len(batch))
            rates = upsample_restore(decode(probs, self.bins), self.geometry.factor)
            for sample, pred in zip(chosen, rates):
                counts = accumulate(counts, pred, crop_target(sample.targets, self.geometry.radar_side), self.bins)
        return float(np.average(losses, weights=weights)), finalize(counts, self.bins)

    def fit(
        self,
        train: Sequence[SampleExt],
        val: Sequence[SampleExt],
        state: Optional[ModelState] = None,
    ) -> Tuple[ModelState, TrainingHistory]:
        _check_consistent(train, "training")
        _check_consistent(val, "validation")
        self._check_geometry(train)

        rng = RngState(self.tcfg.seed)
        if state is None:
            state = init(self.ucfg, rng.spawn(0), lr=self.tcfg.lr)
        state.geometry = self.geometry
        state.output_frames = self.output_frames

        history = TrainingHistory()
        best = state.copy()
        previous_val = None
        stale = 0
        for epoch in range(1, self.tcfg.max_epochs + 1):
            lr_used = state.lr
            train_loss = self.train_epoch(state, train, rng)
            val_loss, report = self.validate(state, val)
            state.epoch = epoch
            history.append(EpochRecord(epoch, train_loss, val_loss, lr_used, report.mcsi, report.mf1))
            logger.info(
                "epoch %d: train loss %.5f, val loss %.5f, lr %.3g, val mCSI %.5f",
                epoch, train_loss, val_loss, lr_used, report.mcsi,
            )

            if val_loss < state.best_val_loss:
                state.best_val_loss = val_loss
                best = state.copy()
                stale = 0
            else:
                stale += 1
            if previous_val is not None and val_loss > previous_val:
                state.lr *= self.tcfg.lr_decay_factor
                logger.info("validation loss rose; learning rate -> %.3g", state.lr)
            previous_val = val_loss
            if stale >= self.tcfg.early_stop_patience:
                logger.info("no improvement for %d epochs; stopping at epoch %d", stale, epoch)
                break

        best.best_val_loss = state.best_val_loss
        return best, history


def train(
    train_manifest: Union[str, Path],
    val_manifest: Union[str, Path],
    ucfg: UNetConfig,
    tcfg: TrainConfig,
    geometry: Geometry,
    bins: RainBins = DEFAULT_BINS,
) -> Tuple[ModelState, TrainingHistory]:
    """Load both splits from their manifests and fit."""
    output_frames = ucfg.out_channels // bins.n_bins
    train_samples = load_split(train_manifest, ucfg.input_frames, output_frames)
    val_samples = load_split(val_manifest, ucfg.input_frames, output_frames)
    return Trainer(ucfg, tcfg, geometry, bins).fit(train_samples, val_samples)
