"""Sliding-window localization, box segmentation, component filtering."""

import numpy as np
import pytest

import oracles
from ventseg.config import RunConfig
from ventseg.errors import ConfigError, ShapeError
from ventseg.pipeline import (
    BoundingBox,
    component_sizes,
    crop_to_dims,
    downsample2,
    enumerate_windows,
    inference_record,
    localize,
    pad_to_min,
    remove_small_components,
    segment_box,
    segment_end_to_end,
)

RNG = np.random.default_rng(4242)


# --------------------------------------------------------------------------
# stubs standing in for trained nets

class StubClassifier:
    """Scores each window by a fixed function of its mean intensity."""

    def __init__(self, fn):
        self.fn = fn

    def positive_probability(self, cubes):
        means = cubes.reshape(cubes.shape[0], -1).mean(axis=1)
        return np.array([self.fn(m) for m in means], dtype=np.float32)


class StubSegmenter:
    """Thresholds the raw cube intensities as its probability map."""

    def __init__(self, gain=1.0):
        self.gain = gain

    def probability_map(self, cube):
        return np.clip(cube * self.gain, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# resolution helpers

def test_downsample2_matches_loop_oracle():
    for dims in [(8, 8, 8), (7, 9, 8), (5, 5, 5)]:
        v = RNG.random(dims).astype(np.float32)
        got = downsample2(v)
        want = oracles.downsample2_naive(v)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_downsample2_block_mean_hand_case():
    v = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
    assert downsample2(v).item() == 3.5


def test_pad_to_min_round_trip():
    v = RNG.random((5, 9, 7)).astype(np.float32)
    padded, dims = pad_to_min(v, 8)
    assert padded.shape == (8, 9, 8)
    assert dims == (5, 9, 7)
    np.testing.assert_array_equal(padded[:5, :, :7], v)
    assert padded[5:].sum() == 0 and padded[:, :, 7:].sum() == 0
    np.testing.assert_array_equal(crop_to_dims(padded, dims), v)


def test_enumerate_windows_appends_flush_anchor():
    np.testing.assert_array_equal(
        np.unique(enumerate_windows((10, 10, 10), 4, 3)[:, 0]), [0, 3, 6]
    )
    np.testing.assert_array_equal(
        np.unique(enumerate_windows((9, 9, 9), 4, 3)[:, 0]), [0, 3, 5]
    )
    np.testing.assert_array_equal(enumerate_windows((4, 4, 4), 4, 3),
                                  [[0, 0, 0]])


# --------------------------------------------------------------------------
# localization

def _volume_with_bright_cube(dims=(40, 40, 40), lo=14, hi=26):
    v = np.zeros(dims, dtype=np.float32)
    v[lo:hi, lo:hi, lo:hi] = 1.0
    return v


def test_localize_centers_box_on_structure():
    v = _volume_with_bright_cube()
    # positive iff the half-res 8-window mean is high enough
    net = StubClassifier(lambda m: 1.0 if m > 0.4 else 0.0)
    res = localize(v, [net], window=8, stride=3, threshold=0.95, box_side=16)
    assert not res.fallback
    assert res.n_windows == enumerate_windows((20, 20, 20), 8, 3).shape[0]
    # structure center is voxel 20 at full scale; box anchors at 20-8
    assert res.box == BoundingBox((12, 12, 12), 16)
    # the chosen box fully contains the bright cube
    assert v[res.box.slices()].sum() == v.sum()


def test_localize_all_positive_averages_all_window_centers():
    v = np.zeros((24, 24, 24), dtype=np.float32)
    net = StubClassifier(lambda m: 1.0)
    res = localize(v, [net], window=8, stride=3, threshold=0.95, box_side=16)
    anchors = enumerate_windows((12, 12, 12), 8, 3)
    centers = anchors + 4.0
    expected_half = np.floor(centers.mean(axis=0) + 0.5).astype(int)
    expected = np.clip(expected_half * 2 - 8, 0, 24 - 16)
    assert res.box.anchor == tuple(expected)
    assert res.positive_anchors.shape[0] == res.n_windows


def test_localize_fallback_takes_argmax_window():
    v = _volume_with_bright_cube()
    net = StubClassifier(lambda m: float(m))  # never crosses 0.95
    res = localize(v, [net], window=8, stride=3, threshold=0.95, box_side=16)
    assert res.fallback
    assert res.positive_anchors.shape == (1, 3)
    assert res.positive_probabilities[0] == res.positive_probabilities.max()
    # the single argmax window sits on the structure
    assert v[res.box.slices()].mean() > 0.1


def test_localize_k_identical_nets_bit_equal_to_single():
    v = RNG.random((32, 32, 32)).astype(np.float32)
    net = StubClassifier(lambda m: float(m) * 1.7 % 1.0)
    one = localize(v, [net], window=8, stride=3, threshold=0.95, box_side=16)
    three = localize(v, [net] * 3, window=8, stride=3, threshold=0.95,
                     box_side=16)
    assert one.box == three.box
    assert one.fallback == three.fallback
    np.testing.assert_array_equal(one.positive_probabilities,
                                  three.positive_probabilities)
    assert three.ensemble_size == 3


def test_localize_box_clamped_inside_volume():
    v = np.zeros((20, 20, 20), dtype=np.float32)
    v[:4, :4, :4] = 1.0  # structure at the very corner
    net = StubClassifier(lambda m: 1.0 if m > 0.2 else 0.0)
    res = localize(v, [net], window=8, stride=3, threshold=0.95, box_side=16)
    assert res.box.anchor == (0, 0, 0)
    z, y, x = res.box.anchor
    assert z + 16 <= 20 and y + 16 <= 20 and x + 16 <= 20


def test_localize_requires_a_classifier():
    with pytest.raises(ConfigError):
        localize(np.zeros((16, 16, 16), dtype=np.float32), [], window=8,
                 box_side=16)


# --------------------------------------------------------------------------
# segmentation inside the box

def test_segment_box_threshold_is_strict():
    v = np.zeros((8, 8, 8), dtype=np.float32)
    v[2, 2, 2] = 0.92      # exactly at threshold: excluded
    v[3, 3, 3] = 0.921     # just above: included
    box = BoundingBox((0, 0, 0), 8)
    res = segment_box(v, box, [StubSegmenter()], threshold=0.92)
    assert res.mask[2, 2, 2] == 0
    assert res.mask[3, 3, 3] == 1


def test_segment_box_or_ensemble_is_union_and_idempotent():
    v = RNG.random((8, 8, 8)).astype(np.float32)
    box = BoundingBox((0, 0, 0), 8)
    a, b = StubSegmenter(1.0), StubSegmenter(1.4)
    ra = segment_box(v, box, [a])
    rb = segment_box(v, box, [b])
    rab = segment_box(v, box, [a, b])
    np.testing.assert_array_equal(rab.mask, ra.mask | rb.mask)
    raa = segment_box(v, box, [a, a])
    np.testing.assert_array_equal(raa.mask, ra.mask)


def test_segment_box_places_mask_at_box_offset():
    v = np.zeros((12, 12, 12), dtype=np.float32)
    v[4:8, 4:8, 4:8] = 1.0
    box = BoundingBox((2, 3, 4), 8)
    res = segment_box(v, box, [StubSegmenter()])
    assert res.mask.shape == v.shape
    assert not res.mask[:2].any()
    np.testing.assert_array_equal(res.mask != 0, v > 0.92)
    assert res.probability_maps[0].shape == (8, 8, 8)


def test_segment_box_rejects_out_of_bounds_box():
    v = np.zeros((8, 8, 8), dtype=np.float32)
    with pytest.raises(ShapeError):
        segment_box(v, BoundingBox((4, 0, 0), 8), [StubSegmenter()])
    with pytest.raises(ConfigError):
        segment_box(v, BoundingBox((0, 0, 0), 8), [])


# --------------------------------------------------------------------------
# connected components

def _random_mask(rng, dims=(32, 32, 32), p=0.08):
    return (rng.random(dims) < p).astype(np.uint8)


def test_component_sizes_matches_flood_fill():
    rng = np.random.default_rng(7)
    for _ in range(5):
        m = _random_mask(rng)
        for conn in (26, 6):
            got = component_sizes(m, conn)
            _, sizes = oracles.flood_fill_components(m, conn)
            assert got == sorted(sizes, reverse=True)
    assert component_sizes(np.zeros((4, 4, 4), dtype=np.uint8)) == []


def test_remove_small_components_matches_flood_fill():
    rng = np.random.default_rng(8)
    for _ in range(5):
        m = _random_mask(rng, p=0.2)
        for conn in (26, 6):
            got = remove_small_components(m, 9, conn)
            want = oracles.remove_small_naive(m, 9, conn)
            np.testing.assert_array_equal(got, want)


def test_remove_small_components_cut_is_strict_less_than():
    line = np.zeros((1, 1, 700), dtype=np.uint8)
    line[0, 0, :299] = 1
    assert remove_small_components(line, 300).sum() == 0
    line[0, 0, :300] = 1
    assert remove_small_components(line, 300).sum() == 300


def test_remove_small_components_idempotent_and_diagonal_aware():
    m = np.zeros((4, 4, 4), dtype=np.uint8)
    m[0, 0, 0] = m[1, 1, 1] = m[2, 2, 2] = 1  # one 26-component, three 6-components
    assert remove_small_components(m, 2, 26).sum() == 3
    assert remove_small_components(m, 2, 6).sum() == 0
    once = remove_small_components(m, 2, 26)
    np.testing.assert_array_equal(remove_small_components(once, 2, 26), once)
    with pytest.raises(ConfigError):
        remove_small_components(m, 2, 18)


# --------------------------------------------------------------------------
# end to end with stubs

def _tiny_cfg():
    cfg = RunConfig.desk()
    cfg.window, cfg.box_side = 8, 16
    cfg.min_component = 3
    # keep the architecture recipes consistent with the geometry
    from dataclasses import replace
    cfg.classifier = replace(cfg.classifier, input_side=8)
    cfg.segmenter = replace(cfg.segmenter, input_side=16)
    cfg.validate()
    return cfg


def test_segment_end_to_end_with_stubs():
    cfg = _tiny_cfg()
    v = np.zeros((30, 30, 30), dtype=np.float32)
    v[10:18, 10:18, 10:18] = 1.0
    v[2, 2, 2] = 1.0  # isolated speck, must be filtered out (< 3 voxels)
    loc = StubClassifier(lambda m: 1.0 if m > 0.3 else 0.0)
    seg = StubSegmenter()
    res = segment_end_to_end(v, [loc], [seg], cfg)
    assert res.mask.shape == v.shape
    assert res.mask.dtype == np.uint8
    got = set(zip(*np.nonzero(res.mask)))
    want = set(zip(*np.nonzero(v[10:18, 10:18, 10:18])))
    # the speck is gone; the cube (or the part inside the box) remains
    assert (2, 2, 2) not in got
    assert got and got <= {(z + 10, y + 10, x + 10) for z, y, x in want}
    assert res.components_after == [len(got)]
    assert res.localization is not None


def test_segment_end_to_end_pads_small_volumes():
    cfg = _tiny_cfg()
    v = np.zeros((12, 12, 12), dtype=np.float32)  # smaller than the 16-box
    v[4:9, 4:9, 4:9] = 1.0
    res = segment_end_to_end(
        v, [StubClassifier(lambda m: 1.0)], [StubSegmenter()], cfg
    )
    assert res.mask.shape == v.shape
    np.testing.assert_array_equal(res.mask != 0, v > 0.92)


def test_inference_record_fields():
    cfg = _tiny_cfg()
    v = np.zeros((20, 20, 20), dtype=np.float32)
    v[6:12, 6:12, 6:12] = 1.0
    res = segment_end_to_end(
        v, [StubClassifier(lambda m: 1.0 if m > 0.02 else 0.0)],
        [StubSegmenter()], cfg,
    )
    rec = inference_record("vol_000", res, dsc_value=0.5)
    assert rec["volume"] == "vol_000"
    assert rec["box_side"] == 16
    assert rec["mask_voxels"] == int(res.mask.sum())
    assert rec["dsc"] == 0.5
    assert rec["fallback"] is False
    assert rec["ensemble_size"] == 1
    assert isinstance(rec["box_anchor"], list)


def test_bounding_box_slices():
    box = BoundingBox((1, 2, 3), 4)
    assert box.slices() == (slice(1, 5), slice(2, 6), slice(3, 7))
