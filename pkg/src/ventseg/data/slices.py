"""Grayscale slice export as binary PGM (P5) images.

PGM is used because it is bit-exact, codec-free, and trivially parsed by
independent readers, which keeps visual-inspection artifacts verifiable.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ShapeError

__all__ = ["slice_to_u8", "write_pgm", "export_slice", "read_pgm"]


def slice_to_u8(plane: np.ndarray) -> np.ndarray:
    """Min-max scale a 2D plane to uint8; a constant plane maps to mid-gray."""
    if plane.ndim != 2:
        raise ShapeError(f"expected a 2D plane, got shape {plane.shape}")
    plane = plane.astype(np.float64, copy=False)
    lo = float(plane.min())
    hi = float(plane.max())
    if hi == lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    scaled = np.rint((plane - lo) / (hi - lo) * 255.0)
    return scaled.astype(np.uint8)


def write_pgm(plane_u8: np.ndarray, path: str | os.PathLike) -> None:
    """Write a uint8 plane as a binary (P5) PGM with maxval 255."""
    if plane_u8.ndim != 2:
        raise ShapeError(f"expected a 2D plane, got shape {plane_u8.shape}")
    h, w = plane_u8.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(plane_u8, dtype=np.uint8).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Parse a binary (P5) PGM written by :func:`write_pgm`."""
    with open(path, "rb") as fh:
        data = fh.read()
    # Header = three whitespace-separated tokens after the magic.
    if not data.startswith(b"P5"):
        raise ShapeError("not a binary PGM file")
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    i += 1  # single whitespace byte after maxval precedes the raster
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ShapeError(f"unsupported maxval {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=i)
    return raster.reshape(h, w).copy()


def _take_plane(array: np.ndarray, axis: int, index: int) -> np.ndarray:
    if array.ndim != 3:
        raise ShapeError(f"expected a 3D array, got shape {array.shape}")
    if axis not in (0, 1, 2):
        raise ShapeError(f"axis must be 0, 1, or 2, got {axis}")
    if not (0 <= index < array.shape[axis]):
        raise ShapeError(
            f"slice index {index} out of range for axis {axis} "
            f"of extent {array.shape[axis]}"
        )
    return np.take(array, index, axis=axis)


def export_slice(volume: np.ndarray, mask: np.ndarray | None, axis: int,
                 index: int, path: str | os.PathLike) -> list[str]:
    """Write one volume slice (and optionally its mask slice) as PGM files.

    Returns the list of paths written.  The mask companion file shares the
    volume file's stem with a ``_mask`` suffix.
    """
    plane = _take_plane(volume, axis, index)
    write_pgm(slice_to_u8(plane), path)
    written = [os.fspath(path)]
    if mask is not None:
        if mask.shape != volume.shape:
            raise ShapeError(
                f"mask shape {mask.shape} differs from volume {volume.shape}"
            )
        mplane = (_take_plane(mask, axis, index) != 0).astype(np.uint8) * 255
        stem, ext = os.path.splitext(os.fspath(path))
        mask_path = stem + "_mask" + (ext or ".pgm")
        write_pgm(mplane, mask_path)
        written.append(mask_path)
    return written
