"""Synthetic test volumes with an exactly known target mask.

A phantom is a bright speckled tissue ellipsoid on a dim background,
containing one dark structure built from a chain of overlapping ellipsoids
(so the ground-truth mask is a single 26-connected component).  Two
optional acquisition artifacts are layered on the intensity image only:
a spherical-cap dropout of the tissue boundary, and a lateral shift of one
z-slab chosen away from the structure so the mask stays aligned.

Generation is a pure function of (config, seed): every random draw comes
from one generator seeded per attempt, and the first attempt satisfying
the config's invariants wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import PhantomGenerationError
from .io import Volume

__all__ = ["PhantomConfig", "generate_phantom"]


@dataclass(frozen=True)
class PhantomConfig:
    """Generator knobs. Defaults target full-scale volume geometry."""

    dims_low: tuple[int, int, int] = (150, 161, 81)
    dims_high: tuple[int, int, int] = (300, 281, 362)
    body_fill: float = 0.78            # body semi-axes as fraction of half-dims
    blob_count: tuple[int, int] = (2, 4)
    background_intensity: float = 0.15
    tissue_intensity: float = 0.55
    structure_intensity: float = 0.08
    speckle_strength: float = 0.55     # mix of exponential multiplicative noise
    smooth_sigma: float = 0.7
    fraction_band: tuple[float, float] = (0.001, 0.010)
    max_extent: int = 100              # cap on mask bounding-box side, voxels
    body_margin: float = 0.18          # mask stays at normalized radius <= 1-margin
    p_missing_boundary: float = 0.5
    p_motion: float = 0.3
    motion_max_shift: int = 4
    max_retries: int = 30
    spacing: tuple[float, float, float] = (50.0, 50.0, 50.0)
    seed: int = 0


def _radius_field(dims, center, semi) -> np.ndarray:
    """Normalized squared ellipsoid radius over the whole grid, float32."""
    zz = ((np.arange(dims[0], dtype=np.float32) - center[0]) / semi[0]) ** 2
    yy = ((np.arange(dims[1], dtype=np.float32) - center[1]) / semi[1]) ** 2
    xx = ((np.arange(dims[2], dtype=np.float32) - center[2]) / semi[2]) ** 2
    return zz[:, None, None] + yy[None, :, None] + xx[None, None, :]


def _paint_ellipsoid(mask: np.ndarray, center, semi) -> None:
    """Set mask voxels inside the ellipsoid, touching only its bounding box."""
    dims = mask.shape
    lo = [max(0, int(np.floor(center[a] - semi[a] - 1))) for a in range(3)]
    hi = [min(dims[a], int(np.ceil(center[a] + semi[a] + 2))) for a in range(3)]
    if any(l >= h for l, h in zip(lo, hi)):
        return
    grids = [
        ((np.arange(lo[a], hi[a], dtype=np.float32) - center[a]) / semi[a]) ** 2
        for a in range(3)
    ]
    rho = (grids[0][:, None, None] + grids[1][None, :, None]
           + grids[2][None, None, :])
    sub = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    sub[rho <= 1.0] = 1


_CONN26 = np.ones((3, 3, 3), dtype=np.int8)


def _single_component(mask: np.ndarray) -> bool:
    _, n = ndimage.label(mask, structure=_CONN26)
    return n == 1


def _attempt(cfg: PhantomConfig, rng: np.random.Generator):
    dims = tuple(
        int(rng.integers(lo, hi + 1))
        for lo, hi in zip(cfg.dims_low, cfg.dims_high)
    )
    center = np.array(
        [d / 2 + rng.uniform(-0.04, 0.04) * d for d in dims], dtype=np.float64
    )
    semi = np.array(
        [cfg.body_fill / 2 * d * rng.uniform(0.88, 1.0) for d in dims],
        dtype=np.float64,
    )
    rho2 = _radius_field(dims, center, semi)
    body = rho2 <= 1.0

    # target structure: a chain of overlapping dark ellipsoids
    n_vox = int(np.prod(dims))
    target_frac = rng.uniform(*cfg.fraction_band)
    n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    r_base = (target_frac * n_vox / (n_blobs * 4.19)) ** (1 / 3)
    r_base = min(r_base, cfg.max_extent / 4.0)

    mask = np.zeros(dims, dtype=np.uint8)
    # first center well inside the body
    blob_center = None
    for _ in range(50):
        c = np.array([rng.uniform(0.25, 0.75) * d for d in dims])
        if float((((c - center) / semi) ** 2).sum()) <= 0.35:
            blob_center = c
            break
    if blob_center is None:
        return None
    for _ in range(n_blobs):
        blob_semi = np.array([r_base * rng.uniform(0.7, 1.45) for _ in range(3)])
        _paint_ellipsoid(mask, blob_center, blob_semi)
        step = rng.normal(size=3)
        step /= max(np.linalg.norm(step), 1e-9)
        blob_center = blob_center + step * 0.8 * float(blob_semi.min())

    total = int(mask.sum())
    if total == 0 or not cfg.fraction_band[0] <= total / n_vox <= cfg.fraction_band[1]:
        return None
    idx = np.nonzero(mask)
    extent = max(int(idx[a].max() - idx[a].min() + 1) for a in range(3))
    if extent > cfg.max_extent:
        return None
    rr = sum(((idx[a] - center[a]) / semi[a]) ** 2 for a in range(3))
    if float(rr.max()) > (1.0 - cfg.body_margin) ** 2:
        return None
    if not _single_component(mask):
        return None

    # intensity: region means under shared multiplicative exponential speckle
    s = cfg.speckle_strength
    base = np.full(dims, cfg.background_intensity, dtype=np.float32)
    base[body] = cfg.tissue_intensity
    base[mask != 0] = cfg.structure_intensity
    speckle = (1.0 - s) + s * rng.exponential(1.0, dims).astype(np.float32)
    vol = base * speckle
    if cfg.smooth_sigma > 0:
        vol = ndimage.gaussian_filter(vol, cfg.smooth_sigma).astype(np.float32)

    # artifact: erase a spherical cap of the tissue shell
    if rng.random() < cfg.p_missing_boundary:
        u = rng.normal(size=3)
        u /= max(np.linalg.norm(u), 1e-9)
        shell = (rho2 >= 0.80) & (rho2 <= 1.08)
        sidx = np.nonzero(shell)
        rel = np.stack([sidx[a] - center[a] for a in range(3)], axis=1)
        norms = np.maximum(np.linalg.norm(rel, axis=1), 1e-9)
        cosang = (rel @ u) / norms
        cap = cosang >= np.cos(np.deg2rad(32.0))
        cap_idx = tuple(sidx[a][cap] for a in range(3))
        vol[cap_idx] = cfg.background_intensity * speckle[cap_idx]

    # artifact: laterally shift one z-slab that avoids the structure
    if rng.random() < cfg.p_motion and cfg.motion_max_shift > 0:
        zmin, zmax = int(idx[0].min()), int(idx[0].max())
        h = max(2, dims[0] // 12)
        gaps = []
        if zmin - h >= 0:
            gaps.append((0, zmin - h))
        if zmax + 1 + h <= dims[0]:
            gaps.append((zmax + 1, dims[0] - h))
        if gaps:
            g0, g1 = gaps[int(rng.integers(len(gaps)))]
            z0 = int(rng.integers(g0, g1 + 1))
            shift = int(rng.integers(1, cfg.motion_max_shift + 1))
            if rng.random() < 0.5:
                shift = -shift
            slab = vol[z0:z0 + h]
            moved = np.full_like(slab, cfg.background_intensity)
            if shift > 0:
                moved[:, :, shift:] = slab[:, :, :-shift]
            else:
                moved[:, :, :shift] = slab[:, :, -shift:]
            vol[z0:z0 + h] = moved

    return vol.astype(np.float32), mask


def generate_phantom(cfg: PhantomConfig, seed: int | None = None):
    """Build one phantom: ``(intensity Volume, mask Volume)``.

    Deterministic in (cfg, seed); raises after ``max_retries`` failed
    attempts to satisfy the config's fraction/placement invariants.
    """
    if seed is None:
        seed = cfg.seed
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([int(seed), attempt])
        result = _attempt(cfg, rng)
        if result is not None:
            vol, mask = result
            return (Volume(vol, cfg.spacing), Volume(mask, cfg.spacing))
    raise PhantomGenerationError(
        f"no valid phantom for seed {seed} within {cfg.max_retries} attempts"
    )
