"""
On-disk formats: the TensorFile container, line-based manifests, and loading
of training windows from sequence files.

TensorFile layout (little-endian):
    magic    4 bytes  b"NWTF"
    version  uint32   1
    dtype    uint32   1 = float32
    rank     uint32
    dims     rank x uint64
    payload  float32 values in row-major order

Dataset layout (per split directory):
    inputs/NNNN.nwt    satellite sequence (L, C, H_s, W_s)
    targets/NNNN.nwt   radar sequence (L, H_r, W_r), time-aligned with inputs
    manifest.txt       input_path<TAB>target_path<TAB>region_id<TAB>start_index

A manifest line with start index t is the window whose inputs are satellite
frames t..t+F_in-1 and whose targets are radar frames t+F_in..t+F_in+T-1.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np

from .augment import SampleExt
from .errors import (
    BadMagicError,
    DatasetError,
    ManifestError,
    TensorFileError,
    TruncatedFileError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)
from .tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAGIC = b"NWTF"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
TENSOR_SUFFIX = ".nwt"
MANIFEST_NAME = "manifest.txt"

_HEADER = struct.Struct("<4sIII")
_PAYLOAD_DTYPE = np.dtype("<f4")


def encode_tensor(t: Tensor) -> bytes:
    array = np.asarray(t)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, array.ndim)
    dims = np.asarray(array.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes()
    return header + dims + payload


def decode_tensor(data: bytes) -> Tensor:
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(data)}")

    _, version, dtype_code, rank = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported (reader is version {FORMAT_VERSION})")
    if dtype_code != DTYPE_FLOAT32:
        raise UnsupportedDtypeError(f"dtype code {dtype_code} is not supported")

    dims_end = _HEADER.size + 8 * rank
    if len(data) < dims_end:
        raise TruncatedFileError(f"rank {rank} needs {dims_end} header bytes, file has {len(data)}")
    shape = struct.unpack_from(f"<{rank}Q", data, _HEADER.size)

    expected = _PAYLOAD_DTYPE.itemsize * math.prod(shape)
    payload = len(data) - dims_end
    if payload < expected:
        raise TruncatedFileError(f"payload has {payload} bytes, shape {shape} needs {expected}")
    if payload > expected:
        raise TensorFileError(f"payload has {payload - expected} trailing bytes after shape {shape}")
    if expected == 0:
        return np.zeros(shape, dtype=DTYPE)

    values = np.frombuffer(data, dtype=_PAYLOAD_DTYPE, offset=dims_end, count=expected // _PAYLOAD_DTYPE.itemsize)
    return values.astype(DTYPE).reshape(shape)


def write_tensor(path: PathLike, t: Tensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))


def read_tensor(path: PathLike) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


@dataclass(frozen=True)
class ManifestEntry:
    input_path: Path
    target_path: Path
    region_id: str
    start_index: int


def parse_manifest(text: str, base_dir: PathLike = ".") -> List[ManifestEntry]:
    """Parse manifest text; relative paths resolve against ``base_dir``."""
    base_dir = Path(base_dir)
    entries = []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(f"expected 4 tab-separated fields, found {len(fields)}", line_number)
        input_path, target_path, region_id, start = fields
        try:
            start_index = int(start)
        except ValueError:
            raise ManifestError(f"start index {start!r} is not an integer", line_number) from None
        if start_index < 0:
            raise ManifestError(f"start index {start_index} is negative", line_number)
        entries.append(ManifestEntry(base_dir / input_path, base_dir / target_path, region_id, start_index))
    return entries


def read_manifest(path: PathLike) -> List[ManifestEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def write_manifest(path: PathLike, entries: Iterable[ManifestEntry]) -> None:
    """Write entries with paths relative to the manifest's directory."""
    path = Path(path)
    lines = ["# input_path\ttarget_path\tregion_id\tstart_index"]
    for entry in entries:
        input_path = Path(entry.input_path).relative_to(path.parent).as_posix()
        target_path = Path(entry.target_path).relative_to(path.parent).as_posix()
        lines.append(f"{input_path}\t{target_path}\t{entry.region_id}\t{entry.start_index}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class SequenceStore:
    """Reads each sequence file once and serves windows out of it."""

    def __init__(self):
        self._cache: Dict[Path, Tensor] = {}

    def get(self, path: Path) -> Tensor:
        path = Path(path)
        if path not in self._cache:
            if not path.exists():
                raise DatasetError(f"sequence file not found: {path}")
            self._cache[path] = read_tensor(path)
        return self._cache[path]

    def sequences(self, entry: ManifestEntry) -> Tuple[Tensor, Tensor]:
        satellite = self.get(entry.input_path)
        radar = self.get(entry.target_path)
        if satellite.ndim != 4 or radar.ndim != 3:
            raise DatasetError(
                f"{entry.input_path.name}: expected satellite (L, C, H, W) and radar (L, H, W), "
                f"got {satellite.shape} and {radar.shape}"
            )
        return satellite, radar


def _check_window(entry: ManifestEntry, length: int, input_frames: int, output_frames: int):
    end = entry.start_index + input_frames + output_frames
    if end > length:
        raise DatasetError(
            f"{entry.input_path.name} start {entry.start_index}: window needs {end} frames, sequence has {length}"
        )


def window_ext(
    entry: ManifestEntry,
    store: SequenceStore,
    input_frames: int,
    output_frames: int,
) -> SampleExt:
    """
    The extended window for ``entry``. At the end of a sequence the trailing
    frames are repeated and the sample is marked as not extended.
    """
    satellite, radar = store.sequences(entry)
    length = min(satellite.shape[0], radar.shape[0])
    _check_window(entry, length, input_frames, output_frames)

    t = entry.start_index
    extended = t + input_frames + output_frames < length
    inputs = satellite[t:t + input_frames + 1] if extended else satellite[t:t + input_frames]
    targets = (
        radar[t + input_frames:t + input_frames + output_frames + 1]
        if extended
        else radar[t + input_frames:t + input_frames + output_frames]
    )
    if not extended:
        inputs = np.concatenate([inputs, inputs[-1:]])
        targets = np.concatenate([targets, targets[-1:]])
    return SampleExt(
        inputs=np.ascontiguousarray(inputs),
        targets=np.ascontiguousarray(targets),
        region_id=entry.region_id,
        start_index=t,
        extended=extended,
    )


def load_split(manifest_path: PathLike, input_frames: int, output_frames: int) -> List[SampleExt]:
    """Every window listed in a split's manifest."""
    entries = read_manifest(manifest_path)
    if not entries:
        raise DatasetError(f"manifest {manifest_path} lists no samples")
    store = SequenceStore()
    return [window_ext(entry, store, input_frames, output_frames) for entry in entries]


def truth_window(entry: ManifestEntry, store: SequenceStore, input_frames: int, output_frames: int) -> Tensor:
    """Radar targets (T, H_r, W_r) of the window."""
    _, radar = store.sequences(entry)
    _check_window(entry, radar.shape[0], input_frames, output_frames)
    t = entry.start_index + input_frames
    return np.ascontiguousarray(radar[t:t + output_frames])


def last_observed_radar(entry: ManifestEntry, store: SequenceStore, input_frames: int) -> Tensor:
    """Radar frame aligned with the last input frame, the persistence proxy."""
    satellite, radar = store.sequences(entry)
    if radar.shape[0] != satellite.shape[0]:
        raise DatasetError(
            f"{entry.target_path.name}: radar sequence ({radar.shape[0]} frames) is not aligned with "
            f"satellite sequence ({satellite.shape[0]} frames); no last observed radar frame"
        )
    return radar[entry.start_index + input_frames - 1]


def input_window(entry: ManifestEntry, store: SequenceStore, input_frames: int) -> Tensor:
    """Satellite inputs (F_in, C, H_s, W_s) of the window; no future frames are needed."""
    satellite, _ = store.sequences(entry)
    end = entry.start_index + input_frames
    if end > satellite.shape[0]:
        raise DatasetError(f"{entry.input_path.name} start {entry.start_index}: inputs need {end} frames, sequence has {satellite.shape[0]}")
    return np.ascontiguousarray(satellite[entry.start_index:end])
