"""Activation capture on a fixed probe set and the AMAT interchange format.

AMAT layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"AMAT"
    4       1     version 0x01
    5       1     dtype 0x01 (float32 LE)
    6       4     u32 rows
    10      4     u32 cols
    14      4+m   u32 length + UTF-8 model id
    ..      4     u32 layer index
    ..      4+p   u32 length + UTF-8 probe-set id
    ..      4*rows*cols  payload, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _binio
from .errors import ConfigError, FormatError, ShapeError
from .matcore import as_matrix, rng_stream
from .zoo import Dataset, TrainedModel, forward

AMAT_MAGIC = b"AMAT"
AMAT_VERSION = 1
DTYPE_F32_LE = 1
MIN_PROBES = 50


@dataclass(frozen=True)
class ActivationMatrix:
    model_id: str
    layer_index: int
    probe_set_id: str
    data: np.ndarray

    def __post_init__(self):
        data = as_matrix(self.data)
        if data.shape[0] < 2:
            raise ShapeError("an activation matrix needs at least 2 probes")
        if not self.model_id:
            raise ConfigError("model id must be non-empty")
        object.__setattr__(self, "data", data)

    @property
    def n(self):
        return self.data.shape[0]

    def quantized(self):
        """Copy with data rounded through float32, as it would be after saving."""
        return ActivationMatrix(self.model_id, self.layer_index, self.probe_set_id,
                                self.data.astype(np.float32).astype(np.float64))


@dataclass(frozen=True)
class ProbeSet:
    probe_set_id: str
    inputs: np.ndarray
    labels: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if len(self.inputs) < MIN_PROBES:
            raise ConfigError(f"probe set needs at least {MIN_PROBES} inputs, got {len(self.inputs)}")
        if len(self.inputs) != len(self.labels):
            raise ShapeError("probe inputs and labels differ in length")

    def __len__(self):
        return len(self.inputs)


def make_probe_set(dataset: Dataset, size: int, seed: int, probe_set_id: str | None = None) -> ProbeSet:
    """Draw ``size`` examples from the test split in a seeded, fixed order."""
    x, y = dataset.test()
    if size > len(y):
        raise ConfigError(f"probe set of {size} requested but test split holds {len(y)}")
    pick = rng_stream(seed).permutation(len(y))[:size]
    return ProbeSet(probe_set_id or f"probe-{seed}-{size}", x[pick], y[pick], seed)


def capture(model: TrainedModel, probes: ProbeSet) -> list:
    _, acts = forward(model, probes.inputs)
    return [ActivationMatrix(model.model_id, i, probes.probe_set_id, a) for i, a in acts.items()]


def amat_to_bytes(m: ActivationMatrix) -> bytes:
    rows, cols = m.data.shape
    return b"".join([
        AMAT_MAGIC, bytes([AMAT_VERSION, DTYPE_F32_LE]), struct.pack("<II", rows, cols),
        _binio.pack_text(m.model_id), struct.pack("<I", m.layer_index),
        _binio.pack_text(m.probe_set_id), _binio.pack_f32(m.data),
    ])


def amat_from_bytes(data: bytes) -> ActivationMatrix:
    r = _binio.Reader(data)
    if r.take(4, "magic") != AMAT_MAGIC:
        raise FormatError("not an AMAT file (bad magic)", offset=0)
    if (v := r.u8("version")) != AMAT_VERSION:
        raise FormatError(f"unsupported AMAT version {v}", offset=4)
    if (d := r.u8("dtype")) != DTYPE_F32_LE:
        raise FormatError(f"unsupported AMAT dtype {d}", offset=5)
    rows = r.dim("rows")
    cols = r.dim("cols")
    if rows * cols > _binio.MAX_DIM:
        raise FormatError(f"{rows}x{cols} matrix exceeds the supported size", offset=6)
    model_id = r.text("model id")
    layer = r.u32("layer index")
    probe_id = r.text("probe-set id")
    at = r.pos
    payload = r.f32(rows * cols, "payload")
    r.expect_end()
    try:
        return ActivationMatrix(model_id, layer, probe_id, payload.reshape(rows, cols))
    except (ValueError, ShapeError) as exc:
        raise FormatError(f"invalid matrix payload: {exc}", offset=at) from exc


def save_amat(m: ActivationMatrix, path) -> None:
    Path(path).write_bytes(amat_to_bytes(m))


def load_amat(path) -> ActivationMatrix:
    return amat_from_bytes(Path(path).read_bytes())


def load_csv(path, model_id: str, layer_index: int, probe_set_id: str) -> ActivationMatrix:
    """Headerless comma-separated decimals; metadata comes from the caller."""
    data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return ActivationMatrix(model_id, layer_index, probe_set_id, data)
