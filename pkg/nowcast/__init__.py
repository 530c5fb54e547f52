"""
Precipitation nowcasting toolkit.
Bins, losses, augmentation, metrics, a numpy U-Net and a synthetic data generator.
"""

from .augment import GEOMETRY_PRESETS, Geometry, Sample, SampleExt, augment_sample, tfi
from .binning import DEFAULT_BINS, RainBins, decode
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, resolve_config
from .losses import LossConfig, grad_check, loss_with_grad
from .metrics import ScoreReport, evaluate
from .model import ModelState, UNetConfig
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, Trainer, predict, train

__all__ = [
    'GEOMETRY_PRESETS',
    'Geometry',
    'Sample',
    'SampleExt',
    'augment_sample',
    'tfi',
    'DEFAULT_BINS',
    'RainBins',
    'decode',
    'load_checkpoint',
    'save_checkpoint',
    'RunConfig',
    'resolve_config',
    'LossConfig',
    'grad_check',
    'loss_with_grad',
    'ScoreReport',
    'evaluate',
    'ModelState',
    'UNetConfig',
    'SynthConfig',
    'synth_generate',
    'TrainConfig',
    'Trainer',
    'predict',
    'train',
]
