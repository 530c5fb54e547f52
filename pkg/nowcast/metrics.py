"""
Forecast verification: per-threshold CSI and F1 from micro-accumulated
confusion counts, plus mCSI / mF1 reporting.

An event at threshold s is a rate strictly greater than s, the same predicate
the ML-Dice loss trains on.
"""

import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .binning import DEFAULT_BINS, RainBins, exceeds
from .dataio import read_tensor
from .errors import ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

TensorSource = Union[str, Path, np.ndarray]


@dataclass
class ConfusionCounts:
    """Hit / false alarm / miss counts per threshold, plus the pixels seen."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    pixels: int = 0

    @classmethod
    def zeros(cls, n_thresholds: int = 5) -> "ConfusionCounts":
        return cls(
            tp=np.zeros(n_thresholds, dtype=np.int64),
            fp=np.zeros(n_thresholds, dtype=np.int64),
            fn=np.zeros(n_thresholds, dtype=np.int64),
        )

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.pixels + other.pixels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return (
            np.array_equal(self.tp, other.tp)
            and np.array_equal(self.fp, other.fp)
            and np.array_equal(self.fn, other.fn)
            and self.pixels == other.pixels
        )


@dataclass
class ScoreReport:
    """Scores for one evaluation run."""

    thresholds: Tuple[float, ...]
    tp: List[int]
    fp: List[int]
    fn: List[int]
    csi: List[float]
    f1: List[float]
    mcsi: float
    mf1: float
    pixels: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "threshold": self.thresholds,
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
                "csi": self.csi,
                "f1": self.f1,
            }
        )

    def to_dict(self) -> Dict:
        return asdict(self)


def accumulate(
    counts: ConfusionCounts,
    pred: Tensor,
    truth: Tensor,
    bins: RainBins = DEFAULT_BINS,
) -> ConfusionCounts:
    """Add the decisions of one prediction/truth pair to ``counts`` (returns a new object)."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if np.any(pred < 0) or np.any(truth < 0):
        raise ValueError("rainfall rates must be non-negative")

    tp = counts.tp.copy()
    fp = counts.fp.copy()
    fn = counts.fn.copy()
    for i, threshold in enumerate(bins.thresholds):
        predicted = exceeds(pred, threshold)
        observed = exceeds(truth, threshold)
        tp[i] += np.count_nonzero(predicted & observed)
        fp[i] += np.count_nonzero(predicted & ~observed)
        fn[i] += np.count_nonzero(~predicted & observed)
    return ConfusionCounts(tp, fp, fn, counts.pixels + int(truth.size))


def critical_success_index(tp: int, fp: int, fn: int) -> float:
    """tp / (tp + fp + fn); 1.0 when there is nothing to detect and nothing was forecast."""
    total = tp + fp + fn
    return 1.0 if total == 0 else tp / total


def f1_score(tp: int, fp: int, fn: int) -> float:
    total = 2 * tp + fp + fn
    return 1.0 if total == 0 else 2 * tp / total


def finalize(counts: ConfusionCounts, bins: RainBins = DEFAULT_BINS) -> ScoreReport:
    csi = [critical_success_index(int(a), int(b), int(c)) for a, b, c in zip(counts.tp, counts.fp, counts.fn)]
    f1 = [f1_score(int(a), int(b), int(c)) for a, b, c in zip(counts.tp, counts.fp, counts.fn)]
    return ScoreReport(
        thresholds=tuple(bins.thresholds),
        tp=[int(x) for x in counts.tp],
        fp=[int(x) for x in counts.fp],
        fn=[int(x) for x in counts.fn],
        csi=csi,
        f1=f1,
        mcsi=float(np.mean(csi)),
        mf1=float(np.mean(f1)),
        pixels=counts.pixels,
    )


def _load(source: TensorSource) -> np.ndarray:
    if isinstance(source, np.ndarray):
        return source
    return read_tensor(source)


def evaluate(
    pred_files: Sequence[TensorSource],
    truth_files: Sequence[TensorSource],
    bins: RainBins = DEFAULT_BINS,
) -> ScoreReport:
    """Pool the counts of every (prediction, truth) pair, then score once."""
    if len(pred_files) != len(truth_files):
        raise ShapeError(f"{len(pred_files)} prediction files but {len(truth_files)} truth files")

    counts = ConfusionCounts.zeros(bins.n_thresholds)
    for index, (pred_source, truth_source) in enumerate(zip(pred_files, truth_files)):
        pred, truth = _load(pred_source), _load(truth_source)
        if pred.shape != truth.shape:
            raise ShapeError(
                f"pair {index} ({_describe(pred_source)}, {_describe(truth_source)}): "
                f"prediction shape {pred.shape} does not match truth shape {truth.shape}"
            )
        counts = accumulate(counts, pred, truth, bins)
    return finalize(counts, bins)


def _describe(source: TensorSource) -> str:
    return "<array>" if isinstance(source, np.ndarray) else str(source)


def format_score_table(report: ScoreReport) -> str:
    """
    Tab-separated score table: one row per threshold
    (threshold, tp, fp, fn, csi, f1) followed by mCSI and mF1 rows.
    """
    buffer = io.StringIO()
    report.to_frame().to_csv(buffer, sep="\t", index=False, float_format="%.5f", lineterminator="\n")
    buffer.write(f"mCSI\t{report.mcsi:.5f}\n")
    buffer.write(f"mF1\t{report.mf1:.5f}\n")
    return buffer.getvalue()
