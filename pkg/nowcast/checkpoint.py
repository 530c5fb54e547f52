"""
Checkpoint directories.

    CKPT/meta.toml          configs, geometry, step/epoch, learning rate, best validation loss
    CKPT/params/<key>.nwt   one TensorFile per parameter, keyed by layer path
    CKPT/adam_m/<key>.nwt   first AdamW moment
    CKPT/adam_v/<key>.nwt   second AdamW moment
"""

import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Optional, Union

import toml

from .augment import Geometry
from .dataio import TENSOR_SUFFIX, read_tensor, write_tensor
from .errors import CheckpointError
from .model import ModelState, UNetConfig, layer_specs

logger = logging.getLogger(__name__)

META_NAME = "meta.toml"
HISTORY_NAME = "history.tsv"
BUFFERS = {"params": "params", "adam_m": "moment1", "adam_v": "moment2"}
FORMAT = 1


def save_checkpoint(state: ModelState, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write ``state`` under directory ``path``. ``extra`` is stored verbatim as
    the ``[run]`` table of the metadata (seed, training config, ...).
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for folder, attribute in BUFFERS.items():
        for key, value in getattr(state, attribute).items():
            write_tensor(root / folder / f"{key}{TENSOR_SUFFIX}", value)

    meta: Dict[str, Any] = {
        "format": FORMAT,
        "parameters": list(state.params),
        "lr": state.lr,
        "step": state.step,
        "epoch": state.epoch,
        "output_frames": state.output_frames,
        "unet": state.unet.model_dump(),
    }
    # TOML has no portable infinity; an untrained state simply omits the key.
    if math.isfinite(state.best_val_loss):
        meta["best_val_loss"] = state.best_val_loss
    if state.geometry is not None:
        meta["geometry"] = state.geometry.model_dump()
    if extra:
        meta["run"] = extra
    with open(root / META_NAME, "w", encoding="utf-8") as file:
        toml.dump(meta, file)
    logger.info("checkpoint written to %s (epoch %d)", root, state.epoch)
    return root


def read_meta(path: Union[str, Path]) -> Dict[str, Any]:
    meta_path = Path(path) / META_NAME
    if not meta_path.exists():
        raise CheckpointError(f"not a checkpoint directory (no {META_NAME}): {path}")
    with open(meta_path, "r", encoding="utf-8") as file:
        meta = toml.load(file)
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"checkpoint format {meta.get('format')!r} is not supported")
    return meta


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    """Rebuild the ModelState written by :func:`save_checkpoint`."""
    root = Path(path)
    meta = read_meta(root)
    unet = UNetConfig(**meta["unet"])
    specs = layer_specs(unet)
    expected = {f"{name}.weight": shape for name, shape in specs.items()}
    expected.update({f"{name}.bias": (shape[0],) for name, shape in specs.items()})

    keys = meta["parameters"]
    if set(keys) != set(expected):
        raise CheckpointError(f"{root}: parameter list does not match the stored U-Net configuration")

    buffers = {}
    for folder, attribute in BUFFERS.items():
        loaded = OrderedDict()
        for key in keys:
            file = root / folder / f"{key}{TENSOR_SUFFIX}"
            if not file.exists():
                raise CheckpointError(f"{root}: missing {folder}/{file.name}")
            tensor = read_tensor(file)
            if tensor.shape != tuple(expected[key]):
                raise CheckpointError(f"{root}: {folder}/{key} has shape {tensor.shape}, expected {tuple(expected[key])}")
            loaded[key] = tensor
        buffers[attribute] = loaded

    return ModelState(
        unet=unet,
        lr=float(meta["lr"]),
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
        best_val_loss=float(meta.get("best_val_loss", math.inf)),
        geometry=Geometry(**meta["geometry"]) if "geometry" in meta else None,
        output_frames=int(meta["output_frames"]),
        **buffers,
    )
