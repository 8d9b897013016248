"""End-to-end inference: locate a cube, segment inside it, filter blobs.

Stage one scans the half-resolution volume with a window classifier
(optionally an ensemble averaged in 64-bit, so identical nets reproduce a
single net bit-exactly), averages the centers of all windows whose mean
probability clears the threshold, and maps that center back to full
resolution as a fixed-size cube clamped inside the volume.  Stage two
runs each segmentation net on the cube, thresholds, combines by voxelwise
OR, and removes small 26-connected components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import RunConfig
from .errors import ConfigError, ShapeError

__all__ = [
    "BoundingBox",
    "LocalizationResult",
    "SegmentationResult",
    "downsample2",
    "pad_to_min",
    "crop_to_dims",
    "enumerate_windows",
    "localize",
    "segment_box",
    "remove_small_components",
    "component_sizes",
    "segment_end_to_end",
    "inference_record",
]


# --------------------------------------------------------------------------
# geometry helpers

def downsample2(volume: np.ndarray) -> np.ndarray:
    """Half resolution by averaging 2³ blocks; edge blocks average what exists."""
    if volume.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got shape {volume.shape}")
    if any(d < 2 for d in volume.shape):
        raise ShapeError(f"dims {volume.shape} too small to downsample")
    out = volume.astype(np.float32, copy=False)
    for axis in range(3):
        idx = np.arange(0, out.shape[axis], 2)
        sums = np.add.reduceat(out, idx, axis=axis, dtype=np.float64)
        counts = np.minimum(idx + 2, out.shape[axis]) - idx
        shape = [1, 1, 1]
        shape[axis] = len(idx)
        out = sums / counts.reshape(shape)
    return out.astype(np.float32)


def pad_to_min(volume: np.ndarray, min_side: int):
    """Zero-pad each short axis at the high end up to ``min_side``.

    Returns ``(padded, original_dims)``; cropping ``padded`` back to
    ``original_dims`` recovers the input bit-exactly.
    """
    if volume.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got shape {volume.shape}")
    dims = volume.shape
    pad = [(0, max(0, min_side - d)) for d in dims]
    if all(p == (0, 0) for p in pad):
        return volume, dims
    return np.pad(volume, pad, mode="constant"), dims


def crop_to_dims(volume: np.ndarray, dims) -> np.ndarray:
    return volume[: dims[0], : dims[1], : dims[2]]


def enumerate_windows(dims, window: int, stride: int = 3) -> np.ndarray:
    """Anchor grid 0, s, 2s, … per axis plus a flush anchor at dim − window."""
    per_axis = []
    for d in dims:
        if d < window:
            raise ShapeError(f"dim {d} smaller than window {window}; pad first")
        last = d - window
        axis = list(range(0, last + 1, stride))
        if axis[-1] != last:
            axis.append(last)
        per_axis.append(np.asarray(axis))
    zz, yy, xx = np.meshgrid(*per_axis, indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


# --------------------------------------------------------------------------
# results

@dataclass(frozen=True)
class BoundingBox:
    """A cube in full-resolution coordinates: low corner plus side."""

    anchor: tuple[int, int, int]
    side: int

    def slices(self) -> tuple[slice, slice, slice]:
        z, y, x = self.anchor
        return (slice(z, z + self.side),
                slice(y, y + self.side),
                slice(x, x + self.side))


@dataclass
class LocalizationResult:
    box: BoundingBox
    positive_anchors: np.ndarray          # (N,3) half-resolution anchors
    positive_probabilities: np.ndarray    # (N,)
    ensemble_size: int
    fallback: bool
    window: int
    n_windows: int


@dataclass
class SegmentationResult:
    mask: np.ndarray                      # full volume shape, uint8
    box: BoundingBox
    probability_maps: list[np.ndarray]    # one per net, box-local
    components_before: list[int]
    components_after: list[int] | None = None
    localization: LocalizationResult | None = None


# --------------------------------------------------------------------------
# stage one: localization

def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def _clamp_box(center_full, side: int, dims) -> BoundingBox:
    anchor = []
    for c, d in zip(center_full, dims):
        if d < side:
            raise ShapeError(f"dim {d} smaller than box side {side}; pad first")
        a = int(c) - side // 2
        anchor.append(int(min(max(a, 0), d - side)))
    return BoundingBox(tuple(anchor), side)


def localize(volume: np.ndarray, classifiers, *, window: int = 64,
             stride: int = 3, threshold: float = 0.95, box_side: int = 128,
             batch: int = 64) -> LocalizationResult:
    """Scan the half-resolution volume and pick the consensus cube.

    ``volume`` must already be padded so every axis is at least
    ``box_side`` (hence at least ``window`` after downsampling).  The
    ensemble probability is the arithmetic mean of the classifiers'
    positive-class outputs, accumulated in 64-bit so that k identical
    classifiers give bit-identical results to a single one.
    """
    if not classifiers:
        raise ConfigError("localization needs at least one classifier")
    half = downsample2(volume)
    anchors = enumerate_windows(half.shape, window, stride)
    n = anchors.shape[0]
    probs = np.zeros(n, dtype=np.float64)
    for lo in range(0, n, batch):
        chunk = anchors[lo: lo + batch]
        cubes = np.empty((len(chunk), 1, window, window, window), dtype=np.float32)
        for j, (z, y, x) in enumerate(chunk):
            cubes[j, 0] = half[z:z + window, y:y + window, x:x + window]
        acc = np.zeros(len(chunk), dtype=np.float64)
        for net in classifiers:
            acc += net.positive_probability(cubes).astype(np.float64)
        probs[lo: lo + len(chunk)] = acc / len(classifiers)
    keep = probs > threshold
    fallback = not bool(keep.any())
    if fallback:
        keep = np.zeros(n, dtype=bool)
        keep[int(np.argmax(probs))] = True
    pos_anchors = anchors[keep]
    pos_probs = probs[keep]
    centers = pos_anchors.astype(np.float64) + window / 2.0
    center_half = _round_half_up(centers.mean(axis=0))
    center_full = center_half * 2
    box = _clamp_box(center_full, box_side, volume.shape)
    return LocalizationResult(
        box=box,
        positive_anchors=pos_anchors,
        positive_probabilities=pos_probs,
        ensemble_size=len(classifiers),
        fallback=fallback,
        window=window,
        n_windows=n,
    )


# --------------------------------------------------------------------------
# stage two: segmentation inside the box

def segment_box(volume: np.ndarray, box: BoundingBox, seg_nets, *,
                threshold: float = 0.92) -> SegmentationResult:
    """Threshold each net's probability map at ``threshold`` and OR them."""
    if not seg_nets:
        raise ConfigError("segmentation needs at least one net")
    sl = box.slices()
    cube = np.ascontiguousarray(volume[sl], dtype=np.float32)
    if cube.shape != (box.side,) * 3:
        raise ShapeError(
            f"box {box.anchor}+{box.side} does not fit inside {volume.shape}"
        )
    maps = [net.probability_map(cube) for net in seg_nets]
    combined = np.zeros(cube.shape, dtype=bool)
    for p in maps:
        combined |= p > threshold
    mask = np.zeros(volume.shape, dtype=np.uint8)
    mask[sl] = combined.astype(np.uint8)
    return SegmentationResult(
        mask=mask,
        box=box,
        probability_maps=maps,
        components_before=component_sizes(mask),
    )


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ConfigError(f"connectivity must be 6 or 26, got {connectivity}")


def component_sizes(mask: np.ndarray, connectivity: int = 26) -> list[int]:
    """Sizes of connected foreground components, largest first."""
    labels, n = ndimage.label(mask != 0, structure=_structure(connectivity))
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel())[1:]
    return sorted((int(s) for s in sizes), reverse=True)


def remove_small_components(mask: np.ndarray, min_voxels: int = 300,
                            connectivity: int = 26) -> np.ndarray:
    """Zero every connected component with strictly fewer voxels than the cut."""
    fg = mask != 0
    labels, n = ndimage.label(fg, structure=_structure(connectivity))
    if n == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_voxels
    keep[0] = False
    return (keep[labels]).astype(mask.dtype)


# --------------------------------------------------------------------------
# end to end

def segment_end_to_end(volume: np.ndarray, loc_nets, seg_nets,
                       cfg: RunConfig) -> SegmentationResult:
    """pad → localize → segment inside the box → drop small components → crop."""
    padded, dims = pad_to_min(volume, cfg.min_side)
    loc = localize(
        padded, loc_nets,
        window=cfg.window, stride=cfg.scan_stride,
        threshold=cfg.loc_threshold, box_side=cfg.box_side,
    )
    seg = segment_box(padded, loc.box, seg_nets, threshold=cfg.seg_threshold)
    filtered = remove_small_components(seg.mask, cfg.min_component)
    seg.mask = crop_to_dims(filtered, dims)
    seg.components_after = component_sizes(seg.mask)
    seg.localization = loc
    return seg


def inference_record(name: str, result: SegmentationResult,
                     dsc_value: float | None = None) -> dict:
    """One JSON-ready record per volume for the inference report."""
    rec = {
        "volume": name,
        "box_anchor": list(result.box.anchor),
        "box_side": result.box.side,
        "components_before": result.components_before,
        "components_after": result.components_after,
        "mask_voxels": int(np.count_nonzero(result.mask)),
    }
    if result.localization is not None:
        rec["positive_windows"] = int(result.localization.positive_anchors.shape[0])
        rec["fallback"] = bool(result.localization.fallback)
        rec["ensemble_size"] = result.localization.ensemble_size
    if dsc_value is not None:
        rec["dsc"] = dsc_value
    return rec
