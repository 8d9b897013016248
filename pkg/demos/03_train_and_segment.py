#!/usr/bin/env python3
"""Train both pipeline stages on a handful of synthetic volumes, then run
the full localize-then-segment pass on an unseen one.

Budgets here are deliberately tiny so the script finishes in a couple of
minutes on one CPU core; expect rough-but-recognizable masks, not the
scores a full study reaches.

Run:  python3 demos/03_train_and_segment.py
"""

import io
import time

import numpy as np

from ventseg.config import RunConfig
from ventseg.data.metrics import box_containment, dsc
from ventseg.data.phantom import generate_phantom
from ventseg.pipeline import (
    downsample2,
    inference_record,
    pad_to_min,
    segment_end_to_end,
)
from ventseg.training import (
    build_localization_dataset,
    build_segmentation_dataset,
    train_localization,
    train_segmentation,
)


def first_last_loss(log_text: str) -> str:
    lines = log_text.strip().splitlines()
    first = lines[0].split("loss=")[1]
    last = lines[-1].split("loss=")[1]
    return f"loss {first} -> {last} over {len(lines)} steps"


cfg = RunConfig.desk(seed=0)
n_train = 6

print(f"generating {n_train} training phantoms + 1 held-out phantom ...")
pairs = []
for i in range(n_train + 1):
    v, m = generate_phantom(cfg.phantom, seed=100 + i)
    pairs.append((v.data, m.data))
train_pairs, (test_vol, test_mask) = pairs[:n_train], pairs[-1]

# ---- stage 1: window classifier on half-resolution volumes --------------
print("\n-- stage 1: localization --")
vols_ds, masks_ds = [], []
for v, m in train_pairs:
    pv, _ = pad_to_min(v, cfg.min_side)
    pm, _ = pad_to_min(m, cfg.min_side)
    vols_ds.append(downsample2(pv).astype(np.float32))
    masks_ds.append(downsample2(pm) > 0)
loc_data = build_localization_dataset(
    vols_ds, masks_ds, cfg.window, seed=cfg.seed,
    stride_pos=cfg.stride_pos, stride_neg=cfg.stride_neg,
    pos_threshold=cfg.pos_threshold, neg_threshold=cfg.neg_threshold,
)
n_pos = sum(1 for _, _, label in loc_data.examples if label == 1)
print(f"balanced window dataset: {len(loc_data.examples)} examples "
      f"({n_pos} positive)")

loc_sgd = cfg.sgd_localization()
loc_sgd.epochs = 2
log = io.StringIO()
t0 = time.monotonic()
loc_net = train_localization(
    loc_data, loc_sgd, seed=cfg.seed, spec=cfg.classifier,
    w_pos=cfg.w_pos, w_neg=cfg.w_neg, per_epoch_sample=256, log=log,
)
print(f"trained in {time.monotonic() - t0:.0f}s; {first_last_loss(log.getvalue())}")

# ---- stage 2: voxel labeler on full-resolution cubes ---------------------
print("\n-- stage 2: segmentation --")
vols = [pad_to_min(v, cfg.min_side)[0].astype(np.float32)
        for v, _ in train_pairs]
masks = [pad_to_min(m, cfg.min_side)[0].astype(np.float32)
         for _, m in train_pairs]
seg_data = build_segmentation_dataset(
    vols, masks, cfg.box_side, cfg.subvolume_min_fraction
)
seg_sgd = cfg.sgd_segmentation()
seg_sgd.epochs = 2
log = io.StringIO()
t0 = time.monotonic()
seg_net = train_segmentation(
    seg_data, seg_sgd, seed=cfg.seed, spec=cfg.segmenter,
    per_epoch_sample=192, log=log,
)
print(f"trained in {time.monotonic() - t0:.0f}s; {first_last_loss(log.getvalue())}")

# ---- inference on the held-out phantom -----------------------------------
print("\n-- end-to-end inference on the held-out phantom --")
t0 = time.monotonic()
res = segment_end_to_end(test_vol, [loc_net], [seg_net], cfg)
print(f"inference took {time.monotonic() - t0:.0f}s")

rec = inference_record("held_out", res, dsc_value=dsc(res.mask, test_mask))
for key, val in rec.items():
    print(f"  {key}: {val}")
print(f"  box contains {100 * box_containment(res.box, test_mask):.1f}% "
      f"of the true structure")
