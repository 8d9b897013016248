"""Bit-exact checkpoint container round trips and failure modes."""

import struct

import numpy as np
import pytest

from ventseg.checkpoint import MAGIC, VERSION, load_net, save_net
from ventseg.errors import (
    BadMagicError,
    TruncatedFileError,
    UnknownLayerKindError,
    UnsupportedVersionError,
)
from ventseg.nets import (
    ClassifierSpec,
    LocalizationNet,
    SegmenterSpec,
    SegmentationNet,
)

CLS_SPEC = ClassifierSpec(input_side=8, conv_channels=(2, 2), hidden=4,
                          conv_dropout=0.15, fc_dropout=0.4)
SEG_SPEC = SegmenterSpec(input_side=16, fullres_channels=2,
                         deep_channels=(2, 4), lrp_layers=2, kernel=3,
                         fusion_channels=2)


def _randomize_buffers(net, seed):
    rng = np.random.default_rng(seed)
    for _, arr in net.buffers():
        arr[...] = rng.normal(0.5, 0.2, arr.shape).astype(arr.dtype)


@pytest.mark.parametrize("make", [
    lambda: LocalizationNet(CLS_SPEC, seed=5),
    lambda: SegmentationNet(SEG_SPEC, seed=5),
], ids=["classifier", "segmenter"])
def test_checkpoint_round_trip_bit_exact(make, tmp_path):
    net = make()
    _randomize_buffers(net, 9)  # make running stats non-trivial
    p1 = tmp_path / "net.dbvw"
    save_net(net, p1)
    back = load_net(p1)
    assert type(back) is type(net)
    assert back.spec == net.spec
    for (na, a), (nb, b) in zip(net.state_arrays(), back.state_arrays()):
        assert na == nb
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    p2 = tmp_path / "again.dbvw"
    save_net(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_reloaded_net_forward_identical(tmp_path):
    net = LocalizationNet(CLS_SPEC, seed=2)
    _randomize_buffers(net, 3)
    save_net(net, tmp_path / "n.dbvw")
    back = load_net(tmp_path / "n.dbvw")
    x = np.random.default_rng(0).normal(0, 1, (3, 1, 8, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(
        net.positive_probability(x), back.positive_probability(x)
    )


def test_checkpoint_header_starts_with_magic_and_version(tmp_path):
    net = LocalizationNet(CLS_SPEC)
    p = tmp_path / "n.dbvw"
    save_net(net, p)
    raw = p.read_bytes()
    magic, version, entries = struct.unpack_from("<4sHI", raw)
    assert magic == MAGIC == b"DBVW"
    assert version == VERSION == 1
    # one recipe entry + one entry per state array
    assert entries == 1 + len(net.state_arrays())


def test_checkpoint_error_kinds(tmp_path):
    net = LocalizationNet(CLS_SPEC)
    good = tmp_path / "good.dbvw"
    save_net(net, good)
    raw = good.read_bytes()

    bad = tmp_path / "magic.dbvw"
    bad.write_bytes(b"WXYZ" + raw[4:])
    with pytest.raises(BadMagicError):
        load_net(bad)

    newer = tmp_path / "version.dbvw"
    newer.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(UnsupportedVersionError):
        load_net(newer)

    short = tmp_path / "short.dbvw"
    short.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        load_net(short)

    header_only = tmp_path / "hdr.dbvw"
    header_only.write_bytes(raw[:6])
    with pytest.raises(TruncatedFileError):
        load_net(header_only)

    trailing = tmp_path / "extra.dbvw"
    trailing.write_bytes(raw + b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_net(trailing)

    # first table entry carries the kind code right after the header
    unknown = tmp_path / "kind.dbvw"
    hdr = struct.calcsize("<4sHI")
    unknown.write_bytes(raw[:hdr] + b"\x09" + raw[hdr + 1:])
    with pytest.raises(UnknownLayerKindError):
        load_net(unknown)


def test_checkpoint_preserves_dropout_rates_and_flags(tmp_path):
    spec = ClassifierSpec(input_side=8, conv_channels=(2, 2), hidden=4,
                          conv_dropout=0.123456, fc_dropout=0.4,
                          bn_before_relu=True)
    save_net(LocalizationNet(spec), tmp_path / "n.dbvw")
    back = load_net(tmp_path / "n.dbvw")
    assert back.spec.conv_dropout == pytest.approx(0.123456, abs=1e-6)
    assert back.spec.fc_dropout == pytest.approx(0.4, abs=1e-6)
    assert back.spec.bn_before_relu is True


def test_checkpoint_preserves_segmenter_recipe(tmp_path):
    save_net(SegmentationNet(SEG_SPEC), tmp_path / "s.dbvw")
    back = load_net(tmp_path / "s.dbvw")
    assert back.spec == SEG_SPEC
