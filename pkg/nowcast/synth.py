"""
Deterministic synthetic satellite/radar sequences.

Gaussian rain cells drift with a constant per-sequence velocity on a periodic
domain measured in satellite pixels. Radar frame i shows the rain field as it
was ``radar_lag`` frames earlier (rain trails the cloud signal); every
satellite band shows an affine transform of a blurred copy of the current
field plus noise. Past satellite frames therefore carry information about
future radar frames.

Seed mixing: sequence k draws from ``SeedSequence([seed, k])``; band
parameters draw from ``SeedSequence([seed, BAND_STREAM])``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import toml
from pydantic import BaseModel, Field, model_validator

from .binning import DEFAULT_BINS, RainBins, quantize_field
from .dataio import MANIFEST_NAME, TENSOR_SUFFIX, ManifestEntry, write_manifest, write_tensor
from .errors import DatasetError
from .tensor import DTYPE, RngState

logger = logging.getLogger(__name__)

DATASET_INFO_NAME = "dataset.toml"
SPLITS = ("train", "val")
BAND_STREAM = 2 ** 32


class SynthConfig(BaseModel):
    """Grid, timing and rain-cell parameters of a synthetic dataset."""

    satellite_size: int = Field(32, ge=4)
    radar_size: int = Field(32, ge=1)
    radar_factor: int = Field(1, ge=1)
    bands: int = Field(4, ge=1)
    input_frames: int = Field(4, ge=1)
    output_frames: int = Field(4, ge=1)
    sequence_length: int = Field(12, ge=2)
    train_sequences: int = Field(24, ge=1)
    val_sequences: int = Field(8, ge=1)
    regions: int = Field(4, ge=1)
    cells_min: int = Field(2, ge=1)
    cells_max: int = Field(5, ge=1)
    speed_max: float = Field(1.0, ge=0)
    amplitude_min: float = Field(1.0, ge=0)
    amplitude_max: float = Field(30.0, ge=0)
    sigma_min: float = Field(1.5, gt=0)
    sigma_max: float = Field(4.0, gt=0)
    satellite_blur: float = Field(1.5, ge=1)
    radar_lag: int = Field(2, ge=0)
    noise: float = Field(0.05, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.cells_max < self.cells_min:
            raise ValueError("cells_max must be >= cells_min")
        if self.amplitude_max < self.amplitude_min:
            raise ValueError("amplitude_max must be >= amplitude_min")
        if self.sigma_max < self.sigma_min:
            raise ValueError("sigma_max must be >= sigma_min")
        if self.amplitude_max <= DEFAULT_BINS.thresholds[-1]:
            raise ValueError(f"amplitude_max must exceed {DEFAULT_BINS.thresholds[-1]} so every bin can occur")
        if self.radar_size % self.radar_factor:
            raise ValueError("radar_size must be a multiple of radar_factor")
        if self.radar_size // self.radar_factor > self.satellite_size:
            raise ValueError("radar footprint is larger than the satellite image")
        if self.sequence_length < self.input_frames + self.output_frames:
            raise ValueError("sequence_length must hold at least one input/target window")
        return self

    @property
    def windows_per_sequence(self) -> int:
        return self.sequence_length - self.input_frames - self.output_frames + 1


PRESETS: Dict[str, Dict] = {
    "desk": {},
    "geometry": {
        "satellite_size": 252,
        "radar_size": 252,
        "radar_factor": 6,
        "bands": 11,
        "sequence_length": 9,
        "train_sequences": 1,
        "val_sequences": 1,
        "regions": 1,
        "cells_min": 20,
        "cells_max": 30,
        "speed_max": 1.5,
        "sigma_min": 3.0,
        "sigma_max": 8.0,
    },
}


def synth_preset(name: str, **overrides) -> SynthConfig:
    if name not in PRESETS:
        raise DatasetError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthConfig(**{**PRESETS[name], **overrides})


@dataclass
class DatasetSummary:
    root: Path
    sequences: Dict[str, int]
    samples: Dict[str, int]
    bin_histogram: List[int] = field(default_factory=list)

    def format(self) -> str:
        lines = [f"dataset: {self.root}"]
        for split in SPLITS:
            lines.append(f"{split}: {self.sequences[split]} sequences, {self.samples[split]} samples")
        lines.append("train radar bin histogram: " + " ".join(str(c) for c in self.bin_histogram))
        return "\n".join(lines)


@dataclass
class _Cells:
    x: np.ndarray
    y: np.ndarray
    amplitude: np.ndarray
    sigma: np.ndarray
    vx: float
    vy: float


def _draw_cells(cfg: SynthConfig, rng: RngState) -> _Cells:
    n = int(rng.integers(cfg.cells_min, cfg.cells_max + 1))
    return _Cells(
        x=rng.uniform(0, cfg.satellite_size, n),
        y=rng.uniform(0, cfg.satellite_size, n),
        amplitude=rng.uniform(cfg.amplitude_min, cfg.amplitude_max, n),
        sigma=rng.uniform(cfg.sigma_min, cfg.sigma_max, n),
        vx=float(rng.uniform(-cfg.speed_max, cfg.speed_max)),
        vy=float(rng.uniform(-cfg.speed_max, cfg.speed_max)),
    )


def _rain_field(cells: _Cells, time: float, rows: np.ndarray, cols: np.ndarray, size: int, blur: float = 1.0) -> np.ndarray:
    """Sum of Gaussian cells at ``time``, evaluated on the (rows x cols) grid of satellite coordinates."""
    out = np.zeros((rows.size, cols.size), dtype=np.float64)
    half = size / 2.0
    for cx, cy, amp, sig in zip(cells.x, cells.y, cells.amplitude, cells.sigma):
        px = (cx + cells.vx * time) % size
        py = (cy + cells.vy * time) % size
        dy = (rows - py + half) % size - half
        dx = (cols - px + half) % size - half
        s = sig * blur
        out += amp * np.exp(-(dy[:, None] ** 2) / (2 * s * s)) * np.exp(-(dx[None, :] ** 2) / (2 * s * s))
    return out


def _radar_coordinates(cfg: SynthConfig) -> np.ndarray:
    """Satellite-pixel coordinates of the radar pixel centres (radar covers the central footprint)."""
    footprint = cfg.radar_size / cfg.radar_factor
    offset = (cfg.satellite_size - footprint) / 2.0
    return offset + (np.arange(cfg.radar_size) + 0.5) / cfg.radar_factor - 0.5


def _band_parameters(cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    rng = RngState(cfg.seed).spawn(BAND_STREAM)
    sign = np.where(rng.uniform(size=cfg.bands) < 0.5, -1.0, 1.0)
    gain = sign * rng.uniform(0.5, 1.5, cfg.bands) / 10.0
    offset = rng.uniform(-1.0, 1.0, cfg.bands)
    return gain, offset


def generate_sequence(cfg: SynthConfig, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Satellite (L, C, H_s, W_s) and radar (L, H_r, W_r) arrays for sequence ``index``."""
    rng = RngState(cfg.seed).spawn(index)
    cells = _draw_cells(cfg, rng)
    gain, offset = _band_parameters(cfg)
    sat_axis = np.arange(cfg.satellite_size, dtype=np.float64)
    radar_axis = _radar_coordinates(cfg)

    satellite = np.empty((cfg.sequence_length, cfg.bands, cfg.satellite_size, cfg.satellite_size), dtype=DTYPE)
    radar = np.empty((cfg.sequence_length, cfg.radar_size, cfg.radar_size), dtype=DTYPE)
    for frame in range(cfg.sequence_length):
        cloud = _rain_field(cells, frame, sat_axis, sat_axis, cfg.satellite_size, cfg.satellite_blur)
        noise = rng.normal(0.0, cfg.noise, (cfg.bands, cfg.satellite_size, cfg.satellite_size)) if cfg.noise else 0.0
        satellite[frame] = gain[:, None, None] * cloud[None] + offset[:, None, None] + noise
        radar[frame] = _rain_field(cells, frame - cfg.radar_lag, radar_axis, radar_axis, cfg.satellite_size)
    return satellite, radar


def synth_generate(cfg: SynthConfig, out_dir: Union[str, Path], bins: RainBins = DEFAULT_BINS) -> DatasetSummary:
    """
    Write ``train/`` and ``val/`` splits plus ``dataset.toml`` under ``out_dir``.

    Output is a pure function of ``cfg``.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    counts = {"train": cfg.train_sequences, "val": cfg.val_sequences}
    histogram = np.zeros(bins.n_bins, dtype=np.int64)
    samples = {}

    index = 0
    for split in SPLITS:
        split_dir = root / split
        entries = []
        for local in range(counts[split]):
            satellite, radar = generate_sequence(cfg, index)
            name = f"{local:04d}{TENSOR_SUFFIX}"
            input_path = split_dir / "inputs" / name
            target_path = split_dir / "targets" / name
            write_tensor(input_path, satellite)
            write_tensor(target_path, radar)
            region = f"R{index % cfg.regions:02d}"
            for start in range(cfg.windows_per_sequence):
                entries.append(ManifestEntry(input_path, target_path, region, start))
            if split == "train":
                histogram += np.bincount(quantize_field(radar, bins).ravel(), minlength=bins.n_bins)
            index += 1
        write_manifest(split_dir / MANIFEST_NAME, entries)
        samples[split] = len(entries)

    with open(root / DATASET_INFO_NAME, "w", encoding="utf-8") as file:
        toml.dump(cfg.model_dump(), file)

    summary = DatasetSummary(root, counts, samples, histogram.tolist())
    logger.info("generated %d sequences under %s", sum(counts.values()), root)
    return summary


def read_dataset_info(path: Union[str, Path]) -> SynthConfig:
    """Load ``dataset.toml`` from a dataset root or from the parent of a split directory."""
    path = Path(path)
    for candidate in (path / DATASET_INFO_NAME, path.parent / DATASET_INFO_NAME):
        if candidate.exists():
            with open(candidate, "r", encoding="utf-8") as file:
                return SynthConfig(**toml.load(file))
    raise DatasetError(f"no {DATASET_INFO_NAME} found at {path} or its parent")
