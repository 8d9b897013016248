"""Bit-exact network checkpoint container (DBVW).

Layout, all little-endian:

* magic ``DBVW`` (4 bytes), format version u16, entry count u32;
* the entry table: per entry a kind code u8, an integer count u8, then
  that many u32 values;
* raw float32 payloads for every array entry, in table order, C-order.

Entry kinds:

* 0 — window-classifier build recipe: ``input_side, hidden,
  conv_dropout*1e6, fc_dropout*1e6, bn_before_relu, conv_channels...``
* 1 — segmenter build recipe: ``input_side, fullres_channels, lrp_layers,
  kernel, fusion_channels, bn_before_relu, deep_channels...``
* 2 — one state array: ``ndim, shape...``; its payload follows the table.

The first entry must be a build recipe; array entries then cover the
net's canonical state order (parameters, then running statistics), which
makes the file self-describing: loading rebuilds the net from the recipe
and overwrites its state arrays in order.  Dropout rates are stored as
micro-units so the table stays integer-only.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import (
    BadMagicError,
    TruncatedFileError,
    UnknownLayerKindError,
    UnsupportedVersionError,
)
from .nets import ClassifierSpec, LocalizationNet, SegmenterSpec, SegmentationNet

__all__ = ["MAGIC", "VERSION", "save_net", "load_net"]

MAGIC = b"DBVW"
VERSION = 1

_HEADER_FMT = "<4sHI"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

KIND_CLASSIFIER = 0
KIND_SEGMENTER = 1
KIND_ARRAY = 2

_RATE_SCALE = 1_000_000


def _classifier_ints(spec: ClassifierSpec) -> list[int]:
    return [
        spec.input_side,
        spec.hidden,
        round(spec.conv_dropout * _RATE_SCALE),
        round(spec.fc_dropout * _RATE_SCALE),
        int(spec.bn_before_relu),
        *spec.conv_channels,
    ]


def _classifier_spec(ints: list[int]) -> ClassifierSpec:
    if len(ints) < 6:
        raise TruncatedFileError("classifier recipe entry too short")
    return ClassifierSpec(
        input_side=ints[0],
        hidden=ints[1],
        conv_dropout=ints[2] / _RATE_SCALE,
        fc_dropout=ints[3] / _RATE_SCALE,
        bn_before_relu=bool(ints[4]),
        conv_channels=tuple(ints[5:]),
    )


def _segmenter_ints(spec: SegmenterSpec) -> list[int]:
    return [
        spec.input_side,
        spec.fullres_channels,
        spec.lrp_layers,
        spec.kernel,
        spec.fusion_channels,
        int(spec.bn_before_relu),
        *spec.deep_channels,
    ]


def _segmenter_spec(ints: list[int]) -> SegmenterSpec:
    if len(ints) < 7:
        raise TruncatedFileError("segmenter recipe entry too short")
    return SegmenterSpec(
        input_side=ints[0],
        fullres_channels=ints[1],
        lrp_layers=ints[2],
        kernel=ints[3],
        fusion_channels=ints[4],
        bn_before_relu=bool(ints[5]),
        deep_channels=tuple(ints[6:]),
    )


def save_net(net, path: str | os.PathLike) -> None:
    """Write a net's build recipe and full state, bit-exactly recoverable."""
    if isinstance(net, LocalizationNet):
        recipe = (KIND_CLASSIFIER, _classifier_ints(net.spec))
    elif isinstance(net, SegmentationNet):
        recipe = (KIND_SEGMENTER, _segmenter_ints(net.spec))
    else:
        raise UnknownLayerKindError(f"cannot checkpoint object of type {type(net)!r}")
    arrays = [np.ascontiguousarray(a, dtype=np.float32)
              for _, a in net.state_arrays()]
    entries = [recipe] + [(KIND_ARRAY, [a.ndim, *a.shape]) for a in arrays]
    parts = [struct.pack(_HEADER_FMT, MAGIC, VERSION, len(entries))]
    for kind, ints in entries:
        if len(ints) > 255:
            raise UnknownLayerKindError(f"entry of kind {kind} has too many fields")
        parts.append(struct.pack(f"<BB{len(ints)}I", kind, len(ints), *ints))
    for a in arrays:
        payload = a.tobytes(order="C")
        if len(payload) != a.size * 4:
            raise AssertionError("float32 payload size mismatch")
        parts.append(payload)
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)


def _read_exact(data: bytes, offset: int, count: int, what: str) -> int:
    if offset + count > len(data):
        raise TruncatedFileError(
            f"checkpoint ends inside {what} "
            f"(need {count} bytes at offset {offset}, have {len(data) - offset})"
        )
    return offset + count


def load_net(path: str | os.PathLike):
    """Read a DBVW checkpoint back into a freshly built net."""
    with open(path, "rb") as fh:
        data = fh.read()
    _read_exact(data, 0, _HEADER_SIZE, "header")
    magic, version, n_entries = struct.unpack_from(_HEADER_FMT, data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(
            f"format version {version} unsupported (expected {VERSION})"
        )
    offset = _HEADER_SIZE
    entries: list[tuple[int, list[int]]] = []
    for i in range(n_entries):
        offset_after = _read_exact(data, offset, 2, f"entry {i} prefix")
        kind, n_ints = struct.unpack_from("<BB", data, offset)
        offset = _read_exact(data, offset_after, 4 * n_ints, f"entry {i} fields")
        ints = list(struct.unpack_from(f"<{n_ints}I", data, offset_after))
        entries.append((kind, ints))
    if not entries:
        raise TruncatedFileError("checkpoint has no entries")
    kind0, ints0 = entries[0]
    if kind0 == KIND_CLASSIFIER:
        net = LocalizationNet(_classifier_spec(ints0))
    elif kind0 == KIND_SEGMENTER:
        net = SegmentationNet(_segmenter_spec(ints0))
    else:
        raise UnknownLayerKindError(
            f"first entry must be a build recipe, got kind {kind0}"
        )
    arrays: list[np.ndarray] = []
    for i, (kind, ints) in enumerate(entries[1:], start=1):
        if kind != KIND_ARRAY:
            raise UnknownLayerKindError(f"entry {i} has unknown kind {kind}")
        if not ints or ints[0] != len(ints) - 1:
            raise TruncatedFileError(f"entry {i} shape header is inconsistent")
        shape = tuple(ints[1:])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = _read_exact(data, offset, 4 * count, f"array {i} payload")
        arrays.append(
            np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset = end
    if offset != len(data):
        raise TruncatedFileError(
            f"{len(data) - offset} trailing bytes after last payload"
        )
    net.load_state(arrays)
    return net
