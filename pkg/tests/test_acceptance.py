"""Acceptance gate: one test per shipped guarantee, at the stated tolerance.

Each test is self-contained (or draws on the session-scoped end-to-end
study fixture) and asserts exactly the promised bound, so `pytest -v`
prints one pass/fail line per guarantee.

Verification chain note: criterion 1 compares the cross-constrained
convolution against the package's dense convolution of the materialized
kernel (the dense path itself is checked against a pure-Python loop
oracle, both in the module tests and on a handful of direct triples
here), which keeps the whole run under its time budget.
"""

import json
import struct
import subprocess
import sys
import time
from fractions import Fraction
from itertools import product

import numpy as np
import pytest

import oracles
from ventseg.checkpoint import load_net, save_net
from ventseg.config import RunConfig
from ventseg.data.io import HEADER_SIZE, read_volume, write_volume
from ventseg.data.metrics import dsc
from ventseg.errors import (
    BadMagicError,
    TruncatedFileError,
    UnknownDtypeError,
    UnknownLayerKindError,
    UnsupportedVersionError,
)
from ventseg.nets import (
    ClassifierSpec,
    LocalizationNet,
    SegmentationNet,
    SegmenterSpec,
    build_segmentation_net,
    count_parameters,
    receptive_field,
)
from ventseg.pipeline import (
    component_sizes,
    remove_small_components,
    segment_end_to_end,
)
from ventseg.tensor_core import (
    BatchNorm,
    Param,
    Conv3d,
    CrossConv3d,
    Dropout,
    Flatten,
    Linear,
    MaxPool3d,
    ReLU,
    Sigmoid,
    TransposeConv3d,
    conv3d,
    cross_conv3d_forward,
    grad_check,
    materialize_cross_kernel,
)
from ventseg.training import (
    AugmentationOp,
    OptimizerState,
    SgdConfig,
    all_rotations,
    dice_loss,
    extract_localization_examples,
    extract_segmentation_subvolumes,
    lr_at_epoch,
    sgd_step,
    weighted_cross_entropy,
)


def _blob_mask(rng, dims, rmax=4):
    """Random solid ellipsoid, guaranteed non-empty."""
    center = [rng.integers(r, d - r) for d, r in zip(dims, (2, 2, 2))]
    radii = rng.integers(2, rmax + 1, size=3)
    zz, yy, xx = np.ogrid[: dims[0], : dims[1], : dims[2]]
    m = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0
    return m.astype(np.uint8)


# --------------------------------------------------------------------------
# 1. cross-constrained convolution == dense convolution of its kernel

def test_criterion_01_cross_conv_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.monotonic()
    worst = 0.0
    for _ in range(100):
        ci = int(rng.integers(1, 5))
        co = int(rng.integers(1, 5))
        k = int(rng.choice([3, 5, 7]))
        dims = tuple(int(d) for d in rng.integers(7, 13, size=3))
        x = rng.standard_normal((1, ci) + dims)
        wz, wy, wx = (rng.standard_normal((co, ci, k)) for _ in range(3))
        b = rng.standard_normal((co,))
        y, _ = cross_conv3d_forward(x, wz, wy, wx, b)
        ref = conv3d(x, materialize_cross_kernel(wz, wy, wx), b, padding="same")
        worst = max(worst, float(np.max(np.abs(y - ref))))
    assert worst <= 1e-5, f"max-abs deviation {worst:g} exceeds 1e-5"
    # a few direct triples against the pure-Python loop oracle
    for k in (3, 5):
        x = rng.standard_normal((1, 2, 6, 6, 6))
        wz, wy, wx = (rng.standard_normal((2, 2, k)) for _ in range(3))
        y, _ = cross_conv3d_forward(x, wz, wy, wx, None)
        ref = oracles.conv3d_naive(
            x, materialize_cross_kernel(wz, wy, wx),
            stride=1, pad=tuple(oracles.same_pad(k) for _ in range(3)),
        )
        assert float(np.max(np.abs(y - ref))) <= 1e-5
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"equivalence sweep took {elapsed:.1f}s (budget 60s)"


# --------------------------------------------------------------------------
# 2. parameter calibration of the default segmentation net

def test_criterion_02_parameter_calibration():
    net = build_segmentation_net()
    _, actual = count_parameters(net, "actual")
    _, dense = count_parameters(net, "dense_equivalent")
    assert actual == 1_735_521 and actual < 2_000_000
    assert dense == 22_508_385 and dense > 15_000_000
    pairs = 0
    for p in net.params():
        if p.name.endswith(".wz"):
            o, i, k = p.value.shape
            assert k == 7
            assert Fraction(3 * o * i * k, o * i * k**3) == Fraction(21, 343)
            pairs += 1
    assert pairs > 0


# --------------------------------------------------------------------------
# 3. finite-difference gradient suite: losses and every layer kind

_LAYER_CASES = [
    (lambda: Conv3d(2, 3, 3, padding="same"), (2, 2, 4, 4, 4)),
    (lambda: Conv3d(2, 3, 2, stride=2, padding=0), (1, 2, 4, 4, 4)),
    (lambda: Conv3d(1, 1, 5, padding="same", method="fft"), (1, 1, 8, 8, 8)),
    (lambda: CrossConv3d(2, 2, kernel=5), (1, 2, 6, 6, 6)),
    (lambda: TransposeConv3d(2, 2), (1, 2, 3, 3, 3)),
    (lambda: MaxPool3d(2), (1, 2, 4, 4, 4)),
    (lambda: BatchNorm(3), (4, 3, 3, 3, 3)),
    (lambda: ReLU(), (2, 3, 4, 4, 4)),
    (lambda: Sigmoid(), (2, 3, 4, 4, 4)),
    (lambda: Dropout(0.3), (2, 3, 4, 4, 4)),
    (lambda: Linear(6, 4), (3, 6)),
    (lambda: Flatten(), (2, 2, 3, 3, 3)),
]


def _rel_close(analytic, numeric, tol=1e-4):
    scale = max(1.0, float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) <= tol * scale


def test_criterion_03_gradient_suite():
    t0 = time.monotonic()
    for fn, shape in _LAYER_CASES:
        rep = grad_check(fn(), shape, tol=1e-4, seed=11)
        assert rep.ok, str(rep)
    rep = grad_check(BatchNorm(2), (3, 2, 3, 3, 3), tol=1e-4, seed=5,
                     train=False)
    assert rep.ok, str(rep)

    rng = np.random.default_rng(7)
    # soft-overlap loss, epsilon 1e-4, on a typical and an all-zero mask
    for mask in (
        (rng.random((5, 5, 5)) > 0.6).astype(np.float64),
        np.zeros((5, 5, 5)),
    ):
        probs = rng.random((5, 5, 5))
        _, analytic = dice_loss(probs, mask, eps=1e-4)
        numeric = oracles.numeric_gradient(
            lambda p: dice_loss(p, mask, eps=1e-4)[0], probs, h=1e-5
        )
        assert _rel_close(analytic, numeric)

    logits = rng.standard_normal((6, 2))
    labels = rng.integers(0, 2, size=6)
    _, analytic = weighted_cross_entropy(logits, labels)
    numeric = oracles.numeric_gradient(
        lambda L: float(np.sum(weighted_cross_entropy(L, labels)[0])),
        logits, h=1e-6,
    )
    assert _rel_close(analytic, numeric)

    elapsed = time.monotonic() - t0
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s (budget 120s)"


# --------------------------------------------------------------------------
# 4. overlap-score identities, exact

def test_criterion_04_dice_identities():
    rng = np.random.default_rng(4)
    y = (rng.random((9, 8, 7)) > 0.5).astype(np.float64)
    eps = 1e-4
    # perfect prediction scores exactly 1 (loss exactly 0)
    loss, _ = dice_loss(y, y, eps=eps)
    assert loss == 0.0
    # empty prediction scores eps / (|Y| + eps), by the identical operation
    loss0, _ = dice_loss(np.zeros_like(y), y, eps=eps)
    expected_score = eps / (0.0 + float(np.sum(y)) + eps)
    assert loss0 == 1.0 - expected_score
    # evaluation metric: symmetric and invariant under shared spatial ops
    a = (rng.random((8, 8, 8)) > 0.5).astype(np.uint8)
    b = (rng.random((8, 8, 8)) > 0.5).astype(np.uint8)
    assert dsc(a, b) == dsc(b, a)
    assert dsc(a, a) == 1.0
    assert dsc(a, b) == oracles.dsc_naive(a, b)
    base = dsc(a, b)
    for rot_axis, rot_k in all_rotations():
        for flips in product((False, True), repeat=3):
            op = AugmentationOp(rot_axis=rot_axis, rot_k=rot_k, flips=flips)
            assert dsc(op.apply(a), op.apply(b)) == base


# --------------------------------------------------------------------------
# 5. window labeling and cube qualification vs brute force

def test_criterion_05_window_labeling_oracle():
    rng = np.random.default_rng(55)
    for _ in range(20):
        dims = tuple(int(d) for d in rng.integers(12, 19, size=3))
        mask = _blob_mask(rng, dims)
        vol = rng.standard_normal(dims).astype(np.float32)
        window = int(rng.choice([6, 8]))

        got = extract_localization_examples(vol, mask, window)
        got_pos = {e.anchor for e in got if e.label == "positive"}
        got_neg = {e.anchor for e in got if e.label == "negative"}
        ref_pos, ref_neg = oracles.window_labels_naive(mask, window)
        assert got_pos == ref_pos
        assert got_neg == ref_neg

        side = int(rng.choice([8, 10]))
        anchors = extract_segmentation_subvolumes(vol, mask, side)
        ref = oracles.subvolume_anchors_naive(mask, side)
        assert len(anchors) == len(ref)
        assert {tuple(int(v) for v in a) for a in anchors} == ref


# --------------------------------------------------------------------------
# 6. small-component removal vs flood-fill oracle; strict 300 cut

def test_criterion_06_component_filtering():
    rng = np.random.default_rng(66)
    for i in range(50):
        density = float(rng.uniform(0.05, 0.45))
        mask = (rng.random((32, 32, 32)) < density).astype(np.uint8)
        got = remove_small_components(mask, 300, connectivity=26)
        ref = oracles.remove_small_naive(mask, 300, connectivity=26)
        assert np.array_equal(got, ref)
        if i % 7 == 0:
            got16 = remove_small_components(mask, 16, connectivity=26)
            assert np.array_equal(
                got16, oracles.remove_small_naive(mask, 16, connectivity=26)
            )
            got6 = remove_small_components(mask, 300, connectivity=6)
            assert np.array_equal(
                got6, oracles.remove_small_naive(mask, 300, connectivity=6)
            )
    # exactly-300 kept, exactly-299 removed: the cut is strictly "< 300"
    m = np.zeros((12, 30, 30), dtype=np.uint8)
    m[0:3, 0:10, 0:10] = 1          # 300 voxels
    m[8:11, 15:25, 15:25] = 1       # 300 voxels ...
    m[8, 15, 15] = 0                # ... minus one -> 299
    out = remove_small_components(m, 300)
    assert component_sizes(out) == [300]
    assert out[0:3, 0:10, 0:10].sum() == 300
    assert out[8:11, 15:25, 15:25].sum() == 0


# --------------------------------------------------------------------------
# 7. learning-rate schedule and optimizer trace

def test_criterion_07_schedule_and_optimizer():
    cfg = SgdConfig()
    schedule = tuple(lr_at_epoch(e, cfg) for e in range(1, cfg.epochs + 1))
    assert schedule == (0.01, 0.01, 0.01, 0.001, 0.001)

    p = Param("w", np.array([1.0]))
    trace_cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    state = OptimizerState([p])
    p.grad[:] = 1.0
    sgd_step([p], trace_cfg, state, lr=0.1)
    assert p.value[0] == 0.9
    p.grad[:] = 1.0
    sgd_step([p], trace_cfg, state, lr=0.1)
    assert p.value[0] == 0.71


# --------------------------------------------------------------------------
# 8. augmentation group: inverses, periodicity, score invariance

def test_criterion_08_augmentation_group():
    rng = np.random.default_rng(8)
    vol = rng.standard_normal((6, 6, 6)).astype(np.float32)
    ops = [
        AugmentationOp(rot_axis=ra, rot_k=rk, flips=fl)
        for ra, rk in all_rotations()
        for fl in product((False, True), repeat=3)
    ]
    assert len(ops) == 80
    for op in ops:
        back = op.apply_inverse(op.apply(vol))
        assert back.tobytes() == vol.tobytes()
    for axis in range(3):
        quarter = AugmentationOp(rot_axis=axis, rot_k=1,
                                 flips=(False, False, False))
        out = vol
        for _ in range(4):
            out = quarter.apply(out)
        assert out.tobytes() == vol.tobytes()
    # score invariance is asserted over the full group in criterion 4
    a = (rng.random((6, 6, 6)) > 0.5).astype(np.uint8)
    b = (rng.random((6, 6, 6)) > 0.5).astype(np.uint8)
    for op in ops:
        assert dsc(op.apply(a), op.apply(b)) == dsc(a, b)


# --------------------------------------------------------------------------
# 9. end-to-end study on synthetic volumes (train 40 / test 20)

def test_criterion_09_end_to_end_study(desk_study):
    s = desk_study
    contained = sum(1 for c in s.containments if c >= 0.95)
    assert contained >= 18, (
        f"boxes holding >=95% of the structure: {contained}/20 "
        f"(containments: {[round(c, 3) for c in s.containments]})"
    )
    mean_dsc = float(np.mean(s.scores))
    failures = sum(1 for v in s.scores if v < 0.6)
    assert mean_dsc >= 0.80, f"mean DSC {mean_dsc:.4f} < 0.80"
    assert failures == 0, (
        f"{failures} test volumes below DSC 0.6: "
        f"{[round(v, 3) for v in s.scores]}"
    )
    # duplicated-network ensembles must reproduce the single net exactly
    for vol, _ in s.test_pairs[:2]:
        single = segment_end_to_end(vol, [s.loc_net], [s.seg_net], s.cfg)
        double = segment_end_to_end(
            vol, [s.loc_net, s.loc_net], [s.seg_net, s.seg_net], s.cfg
        )
        assert double.localization.box == single.localization.box
        assert np.array_equal(double.mask, single.mask)
        assert double.localization.ensemble_size == 2
    assert s.elapsed <= 1800.0, (
        f"study (train + inference) took {s.elapsed:.0f}s (budget 1800s)"
    )


# --------------------------------------------------------------------------
# 10. byte-identical reruns of every pipeline subcommand

def _vs(*args, timeout=300):
    out = subprocess.run(
        [sys.executable, "-m", "ventseg", *args],
        capture_output=True, text=True, timeout=timeout,
    )
    assert out.returncode == 0, f"{args}: {out.stderr}"
    return out.stdout


def test_criterion_10_cli_determinism(tmp_path):
    deterministic = ["--seed", "0", "--threads", "1"]
    data = {}
    for tag in ("a", "b"):
        d = tmp_path / f"data_{tag}"
        _vs("phantom", "gen", "--profile", "desk", "--seed", "7",
            "--threads", "1", "--count", "2", "--out", str(d))
        data[tag] = d
    for name in ("vol_0000.dbv", "vol_0000_mask.dbv",
                 "vol_0001.dbv", "vol_0001_mask.dbv"):
        assert (data["a"] / name).read_bytes() == (data["b"] / name).read_bytes()

    ckpt = {}
    for stage, sets in (
        ("loc", ["--set", "epochs=1", "--set", "loc_per_epoch=32",
                 "--set", "loc_batch=32"]),
        ("seg", ["--set", "epochs=1", "--set", "seg_per_epoch=2",
                 "--set", "seg_batch=2"]),
    ):
        for tag in ("a", "b"):
            out = tmp_path / f"{stage}_{tag}.dbvw"
            _vs("train", stage, "--profile", "desk", *deterministic,
                "--data", str(data["a"]), "--out", str(out), *sets)
            ckpt[stage, tag] = out
        assert ckpt[stage, "a"].read_bytes() == ckpt[stage, "b"].read_bytes()

    mask = tmp_path / "pred.dbv"
    report = tmp_path / "report.jsonl"
    e2e = []
    for _ in range(2):
        mask.unlink(missing_ok=True)
        report.unlink(missing_ok=True)
        stdout = _vs(
            "infer", "e2e", "--profile", "desk", *deterministic,
            "--set", "scan_stride=6",
            "--vol", str(data["a"] / "vol_0000.dbv"),
            "--loc-net", str(ckpt["loc", "a"]),
            "--seg-net", str(ckpt["seg", "a"]),
            "--gt", str(data["a"] / "vol_0000_mask.dbv"),
            "--out", str(mask), "--report", str(report), "--json",
        )
        e2e.append((mask.read_bytes(), report.read_text(), stdout))
    assert e2e[0] == e2e[1]

    slices = []
    for tag in ("a", "b"):
        out = tmp_path / f"slice_{tag}.pgm"
        _vs("export", "slice", "--vol", str(data["a"] / "vol_0000.dbv"),
            "--axis", "z", "--index", "48", "--out", str(out))
        slices.append(out.read_bytes())
    assert slices[0] == slices[1]

    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    (pred / "v.dbv").write_bytes((data["a"] / "vol_0000_mask.dbv").read_bytes())
    (gt / "v.dbv").write_bytes((data["a"] / "vol_0000_mask.dbv").read_bytes())
    runs = [_vs("eval", "--pred", str(pred), "--gt", str(gt))
            for _ in range(2)]
    assert runs[0] == runs[1]


# --------------------------------------------------------------------------
# 11. container formats: bit-exact round trips, designated failures

def test_criterion_11_format_round_trips(tmp_path):
    rng = np.random.default_rng(11)
    # volume container: float32 and mask payloads
    for arr, spacing in (
        (rng.standard_normal((5, 6, 7)).astype(np.float32), (0.5, 0.25, 0.25)),
        ((rng.random((4, 4, 4)) > 0.5).astype(np.uint8), (1.0, 1.0, 1.0)),
    ):
        p = tmp_path / "v.dbv"
        write_volume(arr, p, spacing=spacing)
        vol = read_volume(p)
        assert vol.data.dtype == arr.dtype
        assert np.array_equal(vol.data, arr)
        first = p.read_bytes()
        write_volume(vol.data, p, spacing=vol.spacing)
        assert p.read_bytes() == first

    good = tmp_path / "v.dbv"
    blob = bytearray(good.read_bytes())
    bad = tmp_path / "bad.dbv"

    bad.write_bytes(b"XBV1" + bytes(blob[4:]))
    with pytest.raises(BadMagicError):
        read_volume(bad)
    bad.write_bytes(bytes(blob[:-3]))
    with pytest.raises(TruncatedFileError):
        read_volume(bad)
    bad.write_bytes(bytes(blob) + b"\x00")
    with pytest.raises(TruncatedFileError):
        read_volume(bad)
    patched = bytearray(blob)
    patched[HEADER_SIZE - 1] = 7
    bad.write_bytes(bytes(patched))
    with pytest.raises(UnknownDtypeError):
        read_volume(bad)

    # checkpoint container, both network kinds
    nets = [
        LocalizationNet(ClassifierSpec(input_side=8, conv_channels=(2, 2),
                                       hidden=4), seed=3),
        SegmentationNet(SegmenterSpec(input_side=16, fullres_channels=2,
                                      deep_channels=(2, 4), lrp_layers=2,
                                      kernel=3, fusion_channels=2),
                        seed=3),
    ]
    for i, net in enumerate(nets):
        p = tmp_path / f"n{i}.dbvw"
        save_net(net, p)
        loaded = load_net(p)
        assert type(loaded) is type(net)
        for (na, a), (nb, b) in zip(net.state_arrays(), loaded.state_arrays()):
            assert na == nb and a.dtype == b.dtype and np.array_equal(a, b)
        second = tmp_path / f"n{i}_again.dbvw"
        save_net(loaded, second)
        assert p.read_bytes() == second.read_bytes()

    ck = tmp_path / "n0.dbvw"
    raw = ck.read_bytes()
    bad = tmp_path / "bad.dbvw"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_net(bad)
    bad.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(UnsupportedVersionError):
        load_net(bad)
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        load_net(bad)
    bad.write_bytes(raw + b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_net(bad)
    kind_at = struct.calcsize("<4sHI")
    bad.write_bytes(raw[:kind_at] + b"\x09" + raw[kind_at + 1:])
    with pytest.raises(UnknownLayerKindError):
        load_net(bad)


# --------------------------------------------------------------------------
# 12. deep-stream receptive field covers a >=128 cube

def test_criterion_12_receptive_field():
    rf = receptive_field(build_segmentation_net())
    assert rf["deep_stream"]["rf"] >= 128
    assert rf["deep_stream"] == {"rf": 694, "stride": 16}
