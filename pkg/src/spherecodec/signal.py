"""Sphere signals and their binary file format.

``.osph`` layout (little-endian): magic ``OSPH``, version u16, n_side u32,
channels u32, dtype tag u8 (1 = float64), then ``n_pix * channels`` float64
values in row-major (pixel-major) order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .healpix import build_grid

MAGIC = b"OSPH"
VERSION = 1
DTYPE_F64 = 1
_HEADER = struct.Struct("<4sHIIB")


@dataclass
class SphereSignal:
    n_side: int
    values: np.ndarray

    def __post_init__(self):
        grid = build_grid(self.n_side)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2 or self.values.shape[0] != grid.n_pix:
            raise ValueError(f"expected {grid.n_pix} rows for n_side={self.n_side}, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sphere signal contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.n_side, self.channels, DTYPE_F64)
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> SphereSignal:
        if len(data) < _HEADER.size:
            raise ValueError("truncated sphere signal header")
        magic, version, n_side, channels, tag = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("not a sphere signal file")
        if version != VERSION or tag != DTYPE_F64:
            raise ValueError(f"unsupported sphere signal version {version} / dtype {tag}")
        n = 12 * n_side * n_side * channels
        body = data[_HEADER.size :]
        if len(body) != 8 * n:
            raise ValueError(f"expected {8 * n} payload bytes, found {len(body)}")
        values = np.frombuffer(body, dtype="<f8").reshape(-1, channels).astype(np.float64)
        return cls(n_side, values)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> SphereSignal:
        return cls.from_bytes(Path(path).read_bytes())
