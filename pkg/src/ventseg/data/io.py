"""Bit-exact binary volume container.

Layout (little-endian throughout):

====== ======= ====================================================
offset size    field
====== ======= ====================================================
0      4       magic ``DBV1``
4      12      dims, 3 x u32, array-shape order (z, y, x)
16     12      voxel spacing in micrometers, 3 x f32
28     1       element code: 0 = float32 intensity, 1 = uint8 mask
29     ...     payload, C order (x varies fastest)
====== ======= ====================================================

The payload length must equal ``prod(dims) * element size`` exactly;
anything shorter or longer is rejected.  Float payloads must be NaN-free
on write.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import (
    BadMagicError,
    ShapeError,
    TruncatedFileError,
    UnknownDtypeError,
)

__all__ = ["Volume", "write_volume", "read_volume", "HEADER_SIZE", "MAGIC"]

MAGIC = b"DBV1"
HEADER_SIZE = 29
_HEADER_FMT = "<4s3I3fB"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
DEFAULT_SPACING = (50.0, 50.0, 50.0)


@dataclass
class Volume:
    """A dense 3D grid with physical voxel spacing in micrometers."""

    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def is_mask(self) -> bool:
        return self.data.dtype == np.uint8


def _coerce(data) -> np.ndarray:
    if isinstance(data, Volume):
        data = data.data
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ShapeError(f"volume must be 3D, got shape {arr.shape}")
    if any(d <= 0 for d in arr.shape):
        raise ShapeError(f"dims must be positive, got {arr.shape}")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype == np.uint8:
        return np.ascontiguousarray(arr)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)):
            raise ShapeError("refusing to write non-finite voxel values")
        return np.ascontiguousarray(arr.astype("<f4", copy=False))
    raise ShapeError(f"unsupported voxel dtype {arr.dtype}")


def write_volume(volume, path, spacing=None) -> None:
    """Write a Volume (or 3D array) to ``path``."""
    if isinstance(volume, Volume) and spacing is None:
        spacing = volume.spacing
    spacing = tuple(float(s) for s in (spacing or DEFAULT_SPACING))
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ShapeError(f"spacing must be 3 positive values, got {spacing}")
    arr = _coerce(volume)
    code = 1 if arr.dtype == np.uint8 else 0
    header = struct.pack(_HEADER_FMT, MAGIC, *arr.shape, *spacing, code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_volume(path) -> Volume:
    """Read a container written by :func:`write_volume`, validating layout."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: header cut short at {len(raw)} bytes")
    _, dz, dy, dx, sz, sy, sx, code = struct.unpack_from(_HEADER_FMT, raw)
    if code not in _CODES:
        raise UnknownDtypeError(f"{path}: unknown element code {code}")
    if min(dz, dy, dx) == 0:
        raise TruncatedFileError(f"{path}: zero-sized dims {(dz, dy, dx)}")
    dtype = _CODES[code]
    expect = dz * dy * dx * dtype.itemsize
    payload = raw[HEADER_SIZE:]
    if len(payload) < expect:
        raise TruncatedFileError(
            f"{path}: payload {len(payload)} bytes, header promises {expect}"
        )
    if len(payload) > expect:
        raise TruncatedFileError(
            f"{path}: {len(payload) - expect} trailing bytes after payload"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dz, dy, dx)
    return Volume(data=data.copy(), spacing=(sz, sy, sx))
