"""Shared fixtures.

The expensive piece is ``desk_study``: a full two-stage training run plus
end-to-end inference on held-out synthetic volumes, sized for a single
desktop CPU core.  It is session-scoped and consumed only by the
acceptance tests that need trained networks.
"""

from __future__ import annotations

import time
from types import SimpleNamespace

import numpy as np
import pytest

from ventseg.config import RunConfig
from ventseg.data.metrics import box_containment, dsc
from ventseg.data.phantom import generate_phantom
from ventseg.pipeline import downsample2, pad_to_min, segment_end_to_end
from ventseg.tensor_core import set_num_threads
from ventseg.training import (
    build_localization_dataset,
    build_segmentation_dataset,
    train_localization,
    train_segmentation,
)


def pytest_configure(config):
    set_num_threads(1)


def _phantom_pairs(cfg: RunConfig, seeds) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for s in seeds:
        vol, mask = generate_phantom(cfg.phantom, seed=s)
        pairs.append((vol.data, mask.data))
    return pairs


@pytest.fixture(scope="session")
def desk_study():
    """Train both stages at desk scale and segment 20 held-out volumes.

    Budgeted well under the 30-minute wall-clock bound; the elapsed time
    (training + inference) is part of the returned record so the
    acceptance test can assert the bound rather than trust this comment.
    """
    t0 = time.monotonic()
    cfg = RunConfig.desk(seed=0)

    train_pairs = _phantom_pairs(cfg, range(cfg.n_train))
    test_pairs = _phantom_pairs(cfg, range(100, 100 + cfg.n_test))

    # stage 1: window classifier on half-resolution volumes
    vols_ds, masks_ds = [], []
    for vol, mask in train_pairs:
        pv, _ = pad_to_min(vol, cfg.min_side)
        pm, _ = pad_to_min(mask, cfg.min_side)
        vols_ds.append(downsample2(pv).astype(np.float32))
        masks_ds.append(downsample2(pm) > 0)
    loc_data = build_localization_dataset(
        vols_ds, masks_ds, cfg.window, seed=cfg.seed,
        stride_pos=cfg.stride_pos, stride_neg=cfg.stride_neg,
        pos_threshold=cfg.pos_threshold, neg_threshold=cfg.neg_threshold,
    )
    loc_net = train_localization(
        loc_data, cfg.sgd_localization(), seed=cfg.seed, spec=cfg.classifier,
        w_pos=cfg.w_pos, w_neg=cfg.w_neg, per_epoch_sample=cfg.loc_per_epoch,
    )

    # stage 2: voxel classifier on full-resolution cubes
    vols, masks = [], []
    for vol, mask in train_pairs:
        pv, _ = pad_to_min(vol, cfg.min_side)
        pm, _ = pad_to_min(mask, cfg.min_side)
        vols.append(pv.astype(np.float32))
        masks.append(pm.astype(np.float32))
    seg_data = build_segmentation_dataset(
        vols, masks, cfg.box_side, cfg.subvolume_min_fraction
    )
    seg_net = train_segmentation(
        seg_data, cfg.sgd_segmentation(), seed=cfg.seed, spec=cfg.segmenter,
        per_epoch_sample=cfg.seg_per_epoch,
    )

    # held-out inference, one full pipeline pass per volume
    results, scores, containments, fallbacks = [], [], [], []
    for vol, mask in test_pairs:
        res = segment_end_to_end(vol, [loc_net], [seg_net], cfg)
        results.append(res)
        scores.append(dsc(res.mask, mask))
        containments.append(box_containment(res.localization.box, mask))
        fallbacks.append(res.localization.fallback)

    elapsed = time.monotonic() - t0
    return SimpleNamespace(
        cfg=cfg,
        loc_net=loc_net,
        seg_net=seg_net,
        test_pairs=test_pairs,
        results=results,
        scores=scores,
        containments=containments,
        fallbacks=fallbacks,
        elapsed=elapsed,
    )
