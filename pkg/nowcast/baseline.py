"""
Reference forecasters to compare trained models against.

Persistence repeats the radar frame aligned with the last satellite frame.
The linear readout fits, by least squares, one linear map per lead time from
a pixel's stacked satellite values to the radar rate at that pixel.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .augment import Sample, SampleExt
from .binning import DEFAULT_BINS, RainBins
from .dataio import SequenceStore, last_observed_radar, load_split, read_manifest, truth_window
from .errors import DatasetError, GeometryError
from .metrics import ScoreReport, evaluate
from .tensor import as_tensor

logger = logging.getLogger(__name__)


def persistence_forecast(last_radar: np.ndarray, output_frames: int) -> np.ndarray:
    return as_tensor(np.repeat(last_radar[None], output_frames, axis=0))


def persistence_baseline(
    manifest: Union[str, Path],
    input_frames: int,
    output_frames: int,
    bins: RainBins = DEFAULT_BINS,
) -> ScoreReport:
    """Score persistence over every window of a split."""
    entries = read_manifest(manifest)
    if not entries:
        raise DatasetError(f"manifest {manifest} lists no samples")
    store = SequenceStore()
    preds, truths = [], []
    for entry in entries:
        preds.append(persistence_forecast(last_observed_radar(entry, store, input_frames), output_frames))
        truths.append(truth_window(entry, store, input_frames, output_frames))
    report = evaluate(preds, truths, bins)
    logger.info("persistence over %d samples: mCSI %.5f", len(entries), report.mcsi)
    return report


def _radar_grid(inputs: np.ndarray, radar_side: int) -> np.ndarray:
    """(F, C, H_s, W_s) -> (F * C, H_r, W_r) by nearest-neighbour replication."""
    side = inputs.shape[-1]
    if radar_side % side:
        raise GeometryError(f"radar grid {radar_side} is not a multiple of satellite grid {side}")
    factor = radar_side // side
    stacked = inputs.reshape(-1, *inputs.shape[-2:])
    return stacked.repeat(factor, axis=-2).repeat(factor, axis=-1)


class LinearReadout:
    """
    Per-pixel least-squares readout from stacked satellite channels (plus a
    bias) to the T future radar rates. Negative outputs are clipped to zero.
    """

    def __init__(self, name: str = "linear_readout"):
        self.name = name
        self.weights: Optional[np.ndarray] = None

    def _design(self, inputs: np.ndarray, radar_side: int) -> np.ndarray:
        features = _radar_grid(inputs.astype(np.float64), radar_side)
        features = features.reshape(features.shape[0], -1).T
        return np.hstack([features, np.ones((features.shape[0], 1))])

    def fit(self, samples: Sequence[Union[Sample, SampleExt]]) -> "LinearReadout":
        if not samples:
            raise DatasetError("cannot fit a readout on an empty split")
        samples = [s.base() if isinstance(s, SampleExt) else s for s in samples]
        design = np.vstack([self._design(s.inputs, s.targets.shape[-1]) for s in samples])
        response = np.vstack([s.targets.reshape(s.targets.shape[0], -1).T.astype(np.float64) for s in samples])
        self.weights, *_ = np.linalg.lstsq(design, response, rcond=None)
        logger.info("%s fitted on %d pixels x %d features", self.name, design.shape[0], design.shape[1])
        return self

    def predict(self, inputs: np.ndarray, radar_side: int) -> np.ndarray:
        if self.weights is None:
            raise RuntimeError(f"{self.name} has not been fitted")
        rates = self._design(inputs, radar_side) @ self.weights
        output_frames = self.weights.shape[1]
        rates = rates.T.reshape(output_frames, radar_side, radar_side)
        return as_tensor(np.clip(rates, 0.0, None))


def linear_readout_baseline(
    train_manifest: Union[str, Path],
    val_manifest: Union[str, Path],
    input_frames: int,
    output_frames: int,
    bins: RainBins = DEFAULT_BINS,
) -> ScoreReport:
    """Fit a :class:`LinearReadout` on the training split and score it on validation."""
    readout = LinearReadout().fit(load_split(train_manifest, input_frames, output_frames))
    val: List[SampleExt] = load_split(val_manifest, input_frames, output_frames)
    preds = []
    truths = []
    for ext in val:
        sample = ext.base()
        preds.append(readout.predict(sample.inputs, sample.targets.shape[-1]))
        truths.append(sample.targets)
    report = evaluate(preds, truths, bins)
    logger.info("linear readout over %d samples: mCSI %.5f", len(val), report.mcsi)
    return report
