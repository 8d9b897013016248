"""Command-line surface for the two-stage segmentation engine.

Command groups::

    ventseg phantom gen       synthesize test volumes with known masks
    ventseg train loc|seg     train a stage and write its checkpoint
    ventseg infer localize|segment|e2e
    ventseg eval              score prediction masks against ground truth
    ventseg net params|rf     analytic architecture reports
    ventseg export slice      write a PGM image of one volume slice

Every command accepts ``--profile full|desk``, an optional ``--config``
key=value file, repeatable ``--set key=value`` overrides (flags win over
the file), ``--seed``, ``--threads`` (1 guarantees determinism), and
``--json`` for machine-readable output where applicable.  All commands
exit 0 on success and nonzero with a one-line diagnostic on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_net, save_net
from .config import RunConfig, apply_overrides, parse_config_file
from .data import (
    Volume,
    dsc,
    evaluate,
    export_slice,
    generate_phantom,
    read_volume,
    report_to_json_lines,
    write_volume,
)
from .errors import ConfigError, VentsegError
from .nets import (
    LocalizationNet,
    SegmentationNet,
    count_parameters,
    receptive_field,
)
from .pipeline import (
    BoundingBox,
    downsample2,
    inference_record,
    localize,
    pad_to_min,
    segment_box,
    segment_end_to_end,
)
from .tensor_core.runtime import set_num_threads
from .training import (
    build_localization_dataset,
    build_segmentation_dataset,
    train_localization,
    train_segmentation,
)

__all__ = ["main", "run"]


# --------------------------------------------------------------------------
# shared plumbing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=("full", "desk"), default="full",
                   help="scale profile supplying all default constants")
    p.add_argument("--config", metavar="FILE",
                   help="plain-text key=value overrides (flags win)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   dest="overrides", help="single config override; repeatable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; 1 guarantees determinism")
    p.add_argument("--json", action="store_true",
                   help="machine-readable output where applicable")


def _build_config(args) -> RunConfig:
    cfg = RunConfig.for_profile(args.profile, seed=args.seed)
    overrides: dict[str, str] = {}
    if args.config:
        overrides.update(parse_config_file(args.config))
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    overrides.pop("seed", None)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _mask_path(vol_path: str | Path) -> Path:
    p = Path(vol_path)
    return p.with_name(p.stem + "_mask" + p.suffix)


def _load_pairs(data_dir: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """All (name, intensity, mask) pairs `<stem>.dbv` + `<stem>_mask.dbv`."""
    root = Path(data_dir)
    if not root.is_dir():
        raise ConfigError(f"data directory not found: {data_dir}")
    pairs = []
    for vol_path in sorted(root.glob("*.dbv")):
        if vol_path.stem.endswith("_mask"):
            continue
        mask_path = _mask_path(vol_path)
        if not mask_path.exists():
            raise ConfigError(f"missing mask for {vol_path.name}")
        vol = read_volume(vol_path)
        mask = read_volume(mask_path)
        pairs.append((vol_path.stem, vol.data.astype(np.float32), mask.data))
    if not pairs:
        raise ConfigError(f"no volume/mask pairs in {data_dir}")
    return pairs


def _load_nets(paths: list[str], want):
    nets = []
    for p in paths:
        net = load_net(p)
        if not isinstance(net, want):
            raise ConfigError(
                f"{p} holds a {type(net).__name__}, expected {want.__name__}"
            )
        nets.append(net)
    return nets


def _emit(args, record: dict, human: str) -> None:
    if args.json:
        print(json.dumps(record))
    else:
        print(human)


# --------------------------------------------------------------------------
# subcommands

def _cmd_phantom_gen(args) -> int:
    cfg = _build_config(args)
    if args.count is None:
        out = Path(args.out)
        vol, mask = generate_phantom(cfg.phantom, seed=args.seed)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_volume(vol, out)
        write_volume(mask, _mask_path(out))
        _emit(args, {"written": [str(out), str(_mask_path(out))],
                     "dims": list(vol.dims)},
              f"wrote {out} and {_mask_path(out)} dims={vol.dims}")
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.count):
        vol, mask = generate_phantom(cfg.phantom, seed=args.seed + i)
        vp = out_dir / f"vol_{i:04d}.dbv"
        write_volume(vol, vp)
        write_volume(mask, _mask_path(vp))
        written.append(str(vp))
    _emit(args, {"written": written, "count": args.count},
          f"wrote {args.count} phantom pairs to {out_dir}")
    return 0


def _open_log(args):
    if args.log is None:
        return None, None
    if args.log == "-":
        return sys.stderr, None
    fh = open(args.log, "w", encoding="utf-8")
    return fh, fh


def _cmd_train_loc(args) -> int:
    cfg = _build_config(args)
    pairs = _load_pairs(args.data)
    vols_ds, masks_ds = [], []
    for _, vol, mask in pairs:
        pv, _dims = pad_to_min(vol, cfg.min_side)
        pm, _dims = pad_to_min(mask.astype(np.float32), cfg.min_side)
        vols_ds.append(downsample2(pv))
        masks_ds.append((downsample2(pm) > 0).astype(np.uint8))
    data = build_localization_dataset(
        vols_ds, masks_ds, cfg.window, seed=args.seed,
        stride_pos=cfg.stride_pos, stride_neg=cfg.stride_neg,
        pos_threshold=cfg.pos_threshold, neg_threshold=cfg.neg_threshold,
    )
    log, close_me = _open_log(args)
    try:
        net = train_localization(
            data, cfg.sgd_localization(), seed=args.seed, spec=cfg.classifier,
            w_pos=cfg.w_pos, w_neg=cfg.w_neg,
            per_epoch_sample=cfg.loc_per_epoch, log=log,
        )
    finally:
        if close_me is not None:
            close_me.close()
    save_net(net, args.out)
    _emit(args, {"checkpoint": args.out, "examples": len(data.examples)},
          f"trained window classifier on {len(data.examples)} examples "
          f"-> {args.out}")
    return 0


def _cmd_train_seg(args) -> int:
    cfg = _build_config(args)
    pairs = _load_pairs(args.data)
    vols, masks = [], []
    for _, vol, mask in pairs:
        pv, _dims = pad_to_min(vol, cfg.min_side)
        pm, _dims = pad_to_min(mask, cfg.min_side)
        vols.append(pv)
        masks.append(pm)
    data = build_segmentation_dataset(
        vols, masks, cfg.box_side, cfg.subvolume_min_fraction
    )
    log, close_me = _open_log(args)
    try:
        net = train_segmentation(
            data, cfg.sgd_segmentation(), seed=args.seed, spec=cfg.segmenter,
            per_epoch_sample=cfg.seg_per_epoch, log=log,
        )
    finally:
        if close_me is not None:
            close_me.close()
    save_net(net, args.out)
    _emit(args, {"checkpoint": args.out, "anchors": len(data.anchors)},
          f"trained voxel classifier on {len(data.anchors)} cube anchors "
          f"-> {args.out}")
    return 0


def _cmd_infer_localize(args) -> int:
    cfg = _build_config(args)
    nets = _load_nets(args.net, LocalizationNet)
    vol = read_volume(args.vol).data.astype(np.float32)
    padded, _dims = pad_to_min(vol, cfg.min_side)
    res = localize(
        padded, nets, window=cfg.window, stride=cfg.scan_stride,
        threshold=cfg.loc_threshold, box_side=cfg.box_side,
    )
    rec = {
        "volume": str(args.vol),
        "box_anchor": list(res.box.anchor),
        "box_side": res.box.side,
        "positive_windows": int(res.positive_anchors.shape[0]),
        "n_windows": res.n_windows,
        "fallback": res.fallback,
        "ensemble_size": res.ensemble_size,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(rec) + "\n", encoding="utf-8")
    _emit(args, rec,
          f"box anchor={res.box.anchor} side={res.box.side} "
          f"positives={rec['positive_windows']}/{res.n_windows} "
          f"fallback={res.fallback}")
    return 0


def _parse_anchor(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--box expects z,y,x integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _cmd_infer_segment(args) -> int:
    cfg = _build_config(args)
    nets = _load_nets(args.net, SegmentationNet)
    volume = read_volume(args.vol)
    padded, dims = pad_to_min(volume.data.astype(np.float32), cfg.min_side)
    box = BoundingBox(_parse_anchor(args.box), cfg.box_side)
    res = segment_box(padded, box, nets, threshold=cfg.seg_threshold)
    res.mask = res.mask[: dims[0], : dims[1], : dims[2]]
    write_volume(Volume(res.mask, volume.spacing), args.out)
    rec = inference_record(str(args.vol), res)
    rec["mask_path"] = args.out
    _emit(args, rec,
          f"wrote {args.out} mask_voxels={rec['mask_voxels']} box={box.anchor}")
    return 0


def _cmd_infer_e2e(args) -> int:
    cfg = _build_config(args)
    loc_nets = _load_nets(args.loc_net, LocalizationNet)
    seg_nets = _load_nets(args.seg_net, SegmentationNet)
    volume = read_volume(args.vol)
    res = segment_end_to_end(volume.data.astype(np.float32), loc_nets,
                             seg_nets, cfg)
    write_volume(Volume(res.mask, volume.spacing), args.out)
    score = None
    if args.gt:
        score = dsc(res.mask, read_volume(args.gt).data)
    rec = inference_record(str(args.vol), res, dsc_value=score)
    rec["mask_path"] = args.out
    if args.report:
        with open(args.report, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")
    human = (f"wrote {args.out} mask_voxels={rec['mask_voxels']} "
             f"box={res.box.anchor} fallback={rec['fallback']}")
    if score is not None:
        human += f" dsc={score:.4f}"
    _emit(args, rec, human)
    return 0


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise ConfigError("--pred and --gt must be directories")
    names = sorted(p.name for p in pred_dir.glob("*.dbv"))
    if not names:
        raise ConfigError(f"no .dbv files in {pred_dir}")
    preds, gts = [], []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise ConfigError(f"missing ground truth for {name}")
        preds.append(read_volume(pred_dir / name).data)
        gts.append(read_volume(gt_path).data)
    report = evaluate(preds, gts)
    text = report_to_json_lines(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.json:
        sys.stdout.write(text)
    else:
        print(f"volumes={len(names)} mean_dsc={report.mean_dsc:.6f} "
              f"failure_count={report.failure_count}")
    return 0


def _cmd_net_params(args) -> int:
    cfg = _build_config(args)
    if args.net == "loc":
        net = LocalizationNet(cfg.classifier, seed=args.seed)
    else:
        net = SegmentationNet(cfg.segmenter, seed=args.seed)
    mode = args.mode.replace("-", "_")
    rows, total = count_parameters(net, mode=mode)
    if args.json:
        print(json.dumps({"rows": rows, "total": total, "mode": args.mode}))
    else:
        for name, n in rows:
            print(f"{name:12s} {n:>12,d}")
        print(f"{'total':12s} {total:>12,d}")
    return 0


def _cmd_net_rf(args) -> int:
    cfg = _build_config(args)
    if args.net == "loc":
        net = LocalizationNet(cfg.classifier, seed=args.seed)
    else:
        net = SegmentationNet(cfg.segmenter, seed=args.seed)
    info = receptive_field(net)
    if args.json:
        print(json.dumps(info))
    else:
        for probe, val in info.items():
            print(f"{probe}: {val}")
    return 0


_AXES = {"z": 0, "y": 1, "x": 2, "0": 0, "1": 1, "2": 2}


def _cmd_export_slice(args) -> int:
    volume = read_volume(args.vol)
    mask = read_volume(args.mask).data if args.mask else None
    axis = _AXES[args.axis]
    written = export_slice(volume.data, mask, axis, args.index, args.out)
    _emit(args, {"written": written},
          "wrote " + " and ".join(written))
    return 0


# --------------------------------------------------------------------------
# parser

def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="ventseg",
        description="Two-stage volumetric segmentation: locate, then segment.",
    )
    groups = top.add_subparsers(dest="group", required=True)

    phantom = groups.add_parser("phantom", help="synthetic data")
    psub = phantom.add_subparsers(dest="command", required=True)
    gen = psub.add_parser("gen", help="generate phantom volume/mask pairs")
    gen.add_argument("--out", required=True,
                     help="output .dbv file, or a directory with --count")
    gen.add_argument("--count", type=int, default=None,
                     help="generate N pairs into the --out directory")
    _add_common(gen)
    gen.set_defaults(fn=_cmd_phantom_gen)

    train = groups.add_parser("train", help="train a stage")
    tsub = train.add_subparsers(dest="command", required=True)
    tloc = tsub.add_parser("loc", help="train the window classifier")
    tseg = tsub.add_parser("seg", help="train the voxel classifier")
    for p in (tloc, tseg):
        p.add_argument("--data", required=True,
                       help="directory of <stem>.dbv + <stem>_mask.dbv pairs")
        p.add_argument("--out", required=True, help="checkpoint path (.dbvw)")
        p.add_argument("--log", default=None,
                       help="step-metrics log path ('-' for stderr)")
        _add_common(p)
    tloc.set_defaults(fn=_cmd_train_loc)
    tseg.set_defaults(fn=_cmd_train_seg)

    infer = groups.add_parser("infer", help="run inference stages")
    isub = infer.add_subparsers(dest="command", required=True)
    iloc = isub.add_parser("localize", help="find the bounding cube")
    iloc.add_argument("--vol", required=True)
    iloc.add_argument("--net", required=True, action="append",
                      help="classifier checkpoint; repeat to ensemble")
    iloc.add_argument("--out", default=None, help="write the JSON record here")
    _add_common(iloc)
    iloc.set_defaults(fn=_cmd_infer_localize)

    iseg = isub.add_parser("segment", help="segment inside a given cube")
    iseg.add_argument("--vol", required=True)
    iseg.add_argument("--box", required=True, metavar="Z,Y,X",
                      help="cube anchor in full-resolution voxels")
    iseg.add_argument("--net", required=True, action="append",
                      help="segmentation checkpoint; repeat to OR-ensemble")
    iseg.add_argument("--out", required=True, help="output mask .dbv")
    _add_common(iseg)
    iseg.set_defaults(fn=_cmd_infer_segment)

    ie2e = isub.add_parser("e2e", help="full pipeline on one volume")
    ie2e.add_argument("--vol", required=True)
    ie2e.add_argument("--loc-net", required=True, action="append",
                      dest="loc_net")
    ie2e.add_argument("--seg-net", required=True, action="append",
                      dest="seg_net")
    ie2e.add_argument("--out", required=True, help="output mask .dbv")
    ie2e.add_argument("--gt", default=None,
                      help="ground-truth mask; adds a score to the record")
    ie2e.add_argument("--report", default=None,
                      help="append the JSON record to this JSON-lines file")
    _add_common(ie2e)
    ie2e.set_defaults(fn=_cmd_infer_e2e)

    ev = groups.add_parser("eval", help="score masks against ground truth")
    ev.add_argument("--pred", required=True, help="directory of predicted masks")
    ev.add_argument("--gt", required=True, help="directory of true masks")
    ev.add_argument("--out", default=None, help="write JSON-lines report here")
    _add_common(ev)
    ev.set_defaults(fn=_cmd_eval)

    net = groups.add_parser("net", help="architecture reports")
    nsub = net.add_subparsers(dest="command", required=True)
    nparams = nsub.add_parser("params", help="learnable-parameter counts")
    nparams.add_argument("--net", choices=("loc", "seg"), required=True)
    nparams.add_argument("--mode", choices=("actual", "dense-equivalent"),
                         default="actual")
    _add_common(nparams)
    nparams.set_defaults(fn=_cmd_net_params)
    nrf = nsub.add_parser("rf", help="receptive-field calculator")
    nrf.add_argument("--net", choices=("loc", "seg"), required=True)
    _add_common(nrf)
    nrf.set_defaults(fn=_cmd_net_rf)

    export = groups.add_parser("export", help="human-inspection artifacts")
    esub = export.add_subparsers(dest="command", required=True)
    eslice = esub.add_parser("slice", help="write one slice as a PGM image")
    eslice.add_argument("--vol", required=True)
    eslice.add_argument("--mask", default=None)
    eslice.add_argument("--axis", choices=tuple(_AXES), default="z")
    eslice.add_argument("--index", type=int, required=True)
    eslice.add_argument("--out", required=True)
    _add_common(eslice)
    eslice.set_defaults(fn=_cmd_export_slice)

    return top


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        set_num_threads(args.threads)
        return args.fn(args)
    except (VentsegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
