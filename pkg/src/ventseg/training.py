"""Losses, optimizer, schedule, augmentation, example extraction, trainers.

The two trainers are deliberately plain epoch loops: shuffle, slice cubes
out of the source volumes, apply a random lattice isometry, forward,
analytic loss gradient, SGD-with-momentum step.  One ``numpy`` generator
seeded by the caller drives shuffling, augmentation and dropout, so a run
is a pure function of (data, config, seed).

Each step appends one plain-text line to the optional log stream:
``epoch=<e> step=<s> lr=<lr> loss=<loss>`` (stable order, parseable).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyMaskError, NonFiniteGradientError, ShapeError
from .nets import (
    ClassifierSpec,
    LocalizationNet,
    SegmentationNet,
    SegmenterSpec,
)
from .tensor_core.layers import Param, softmax2

__all__ = [
    "SgdConfig",
    "OptimizerState",
    "sgd_step",
    "lr_at_epoch",
    "weighted_cross_entropy",
    "dice_loss",
    "AugmentationOp",
    "all_rotations",
    "sample_augmentation",
    "augment",
    "WindowLabel",
    "classify_window_fraction",
    "box_voxel_counts",
    "extract_localization_examples",
    "extract_segmentation_subvolumes",
    "balance_examples",
    "LocalizationDataset",
    "SegmentationDataset",
    "build_localization_dataset",
    "build_segmentation_dataset",
    "train_localization",
    "train_segmentation",
]


# --------------------------------------------------------------------------
# optimizer and schedule

@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 5
    lr_decay: float = 0.1
    decay_after_epoch: int = 3
    batch_size: int = 200

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid SGD config: {self}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr decay must be in (0, 1], got {self.lr_decay}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight decay must be >= 0")


class OptimizerState:
    """One velocity buffer per parameter, zero-initialized."""

    def __init__(self, params: list[Param]):
        self.velocities = [np.zeros_like(p.value) for p in params]

    def __len__(self) -> int:
        return len(self.velocities)


def sgd_step(params: list[Param], cfg: SgdConfig, state: OptimizerState,
             lr: float) -> None:
    """v <- momentum*v + (grad + weight_decay*p);  p <- p - lr*v.

    The whole step is aborted (no parameter touched) when any gradient
    contains a non-finite value.
    """
    if len(params) != len(state.velocities):
        raise ShapeError("optimizer state does not match parameter list")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(
                f"non-finite gradient in {p.name}; step aborted"
            )
    for p, v in zip(params, state.velocities):
        v *= cfg.momentum
        v += p.grad + cfg.weight_decay * p.value
        p.value -= lr * v


def lr_at_epoch(epoch: int, cfg: SgdConfig) -> float:
    """Piecewise schedule: the decay factor applies after ``decay_after_epoch``."""
    if not 1 <= epoch <= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch > cfg.decay_after_epoch:
        return cfg.learning_rate * cfg.lr_decay
    return cfg.learning_rate


# --------------------------------------------------------------------------
# losses

def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                           w_pos: float = 1.2, w_neg: float = 1.0):
    """Class-weighted 2-way cross entropy.

    Returns per-example losses (B,) and the analytic gradient w.r.t. the
    logits (B, 2): ``w * (softmax - onehot)``.  The log is clamped at 1e-12.
    """
    logits = np.atleast_2d(np.asarray(logits))
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"expected (B,2) logits with (B,) labels, got {logits.shape} / {labels.shape}"
        )
    p = softmax2(logits)
    idx = np.arange(labels.shape[0])
    p_true = np.maximum(p[idx, labels], 1e-12)
    w = np.where(labels == 1, w_pos, w_neg).astype(p.dtype)
    losses = -w * np.log(p_true)
    grads = p.copy()
    grads[idx, labels] -= 1.0
    grads *= w[:, None]
    return losses, grads


def dice_loss(probs: np.ndarray, mask: np.ndarray, eps: float = 1e-4):
    """Soft-overlap loss on probabilities against a binary mask.

    score = (2*<p,m> + eps) / (sum(p) + sum(m) + eps);  loss = 1 - score.
    Gradient per element: -(2*m_j*D - N) / D**2 with N, D the score's
    numerator and denominator.  Returns ``(loss, grad)``.
    """
    if probs.shape != mask.shape:
        raise ShapeError(f"shape mismatch {probs.shape} vs {mask.shape}")
    p = probs.astype(np.float64, copy=False)
    m = mask.astype(np.float64, copy=False)
    num = 2.0 * float(np.sum(p * m)) + eps
    den = float(np.sum(p)) + float(np.sum(m)) + eps
    loss = 1.0 - num / den
    grad = -(2.0 * m * den - num) / (den * den)
    return loss, grad.astype(probs.dtype, copy=False)


# --------------------------------------------------------------------------
# augmentation group: 10 rotations x independent axis flips

_PLANES = ((1, 2), (0, 2), (0, 1))  # rotation planes about axes (z, y, x)


@dataclass(frozen=True)
class AugmentationOp:
    """A lattice isometry: optional quarter-turn rotation, then axis flips.

    ``rot_axis`` is -1 for identity or the index (0=z, 1=y, 2=x) of the
    rotation axis; ``rot_k`` counts quarter turns (1..3).
    """

    rot_axis: int = -1
    rot_k: int = 0
    flips: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if self.rot_axis == -1 and self.rot_k != 0:
            raise ConfigError("identity rotation must have rot_k == 0")
        if self.rot_axis != -1 and (self.rot_axis not in (0, 1, 2)
                                    or self.rot_k not in (1, 2, 3)):
            raise ConfigError(f"invalid rotation ({self.rot_axis}, {self.rot_k})")

    def valid_for(self, shape) -> bool:
        if self.rot_axis == -1 or self.rot_k == 2:
            return True
        a, b = _PLANES[self.rot_axis]
        return shape[a] == shape[b]

    def apply(self, vol: np.ndarray) -> np.ndarray:
        if not self.valid_for(vol.shape):
            raise ShapeError(
                f"rotation about axis {self.rot_axis} needs equal plane dims, "
                f"got {vol.shape}"
            )
        out = vol
        if self.rot_axis != -1:
            out = np.rot90(out, k=self.rot_k, axes=_PLANES[self.rot_axis])
        for ax, f in enumerate(self.flips):
            if f:
                out = np.flip(out, axis=ax)
        return np.ascontiguousarray(out)

    def apply_inverse(self, vol: np.ndarray) -> np.ndarray:
        out = vol
        for ax, f in enumerate(self.flips):
            if f:
                out = np.flip(out, axis=ax)
        if self.rot_axis != -1:
            out = np.rot90(out, k=4 - self.rot_k, axes=_PLANES[self.rot_axis])
        return np.ascontiguousarray(out)


def all_rotations() -> list[tuple[int, int]]:
    """The 10 rotation choices: identity plus 3 quarter-turn counts per axis."""
    return [(-1, 0)] + [(ax, k) for ax in range(3) for k in (1, 2, 3)]


def sample_augmentation(rng: np.random.Generator, shape) -> AugmentationOp:
    """Uniform rotation among those valid for ``shape``; flips each with p=0.5."""
    valid = [
        (ax, k) for ax, k in all_rotations()
        if AugmentationOp(ax, k).valid_for(shape)
    ]
    ax, k = valid[int(rng.integers(len(valid)))]
    flips = tuple(bool(rng.integers(2)) for _ in range(3))
    return AugmentationOp(ax, k, flips)


def augment(volume: np.ndarray, mask: np.ndarray | None, op: AugmentationOp):
    """Apply one op to a volume (and its mask, when given) identically."""
    if mask is None:
        return op.apply(volume)
    if mask.shape != volume.shape:
        raise ShapeError(f"mask shape {mask.shape} != volume {volume.shape}")
    return op.apply(volume), op.apply(mask)


# --------------------------------------------------------------------------
# example extraction

@dataclass(frozen=True)
class WindowLabel:
    anchor: tuple[int, int, int]
    label: str  # "positive" | "negative" | "ambiguous"
    fraction: float


def classify_window_fraction(fraction: float, pos_threshold: float = 0.99,
                             neg_threshold: float = 0.80) -> str:
    if fraction > pos_threshold:
        return "positive"
    if fraction < neg_threshold:
        return "negative"
    return "ambiguous"


def _integral_table(mask: np.ndarray) -> np.ndarray:
    t = np.zeros(tuple(d + 1 for d in mask.shape), dtype=np.int64)
    t[1:, 1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    return t


def box_voxel_counts(table: np.ndarray, anchors: np.ndarray, side: int) -> np.ndarray:
    """Exact foreground counts of ``side``-cubes at integer anchors.

    ``table`` is the zero-padded 3D cumulative-sum table of the mask.
    """
    a = np.asarray(anchors, dtype=np.int64).reshape(-1, 3)
    z0, y0, x0 = a[:, 0], a[:, 1], a[:, 2]
    z1, y1, x1 = z0 + side, y0 + side, x0 + side
    return (
        table[z1, y1, x1]
        - table[z0, y1, x1] - table[z1, y0, x1] - table[z1, y1, x0]
        + table[z0, y0, x1] + table[z0, y1, x0] + table[z1, y0, x0]
        - table[z0, y0, x0]
    )


def _stride_grid(dims, side: int, stride: int) -> np.ndarray:
    axes = [np.arange(0, d - side + 1, stride) for d in dims]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


def extract_localization_examples(
    volume_ds: np.ndarray, mask_ds: np.ndarray, window: int,
    stride_pos: int = 2, stride_neg: int = 3,
    pos_threshold: float = 0.99, neg_threshold: float = 0.80,
) -> list[WindowLabel]:
    """Label windows by the fraction of structure voxels they contain.

    Two separate scans: the positive-stride grid keeps only windows with
    fraction > ``pos_threshold``; the negative-stride grid keeps only
    windows with fraction < ``neg_threshold``.  Everything else is dropped.
    """
    if mask_ds.shape != volume_ds.shape:
        raise ShapeError(f"mask {mask_ds.shape} != volume {volume_ds.shape}")
    total = int(np.count_nonzero(mask_ds))
    if total == 0:
        raise EmptyMaskError("window labeling needs a non-empty mask")
    if any(d < window for d in volume_ds.shape):
        raise ShapeError(
            f"dims {volume_ds.shape} smaller than window {window}; pad first"
        )
    table = _integral_table(mask_ds != 0)
    out: list[WindowLabel] = []
    for stride, keep in ((stride_pos, "positive"), (stride_neg, "negative")):
        anchors = _stride_grid(volume_ds.shape, window, stride)
        fracs = box_voxel_counts(table, anchors, window) / total
        for anc, f in zip(anchors, fracs):
            if classify_window_fraction(float(f), pos_threshold, neg_threshold) == keep:
                out.append(WindowLabel(tuple(int(v) for v in anc), keep, float(f)))
    return out


def extract_segmentation_subvolumes(
    volume: np.ndarray, mask: np.ndarray, side: int,
    min_fraction: float = 0.97,
) -> np.ndarray:
    """All stride-1 anchors whose cube holds >= ``min_fraction`` of the mask.

    Returns an (N, 3) integer array.  Counting is exact (integer table);
    the tiny epsilon only absorbs float noise in the threshold product.
    """
    if mask.shape != volume.shape:
        raise ShapeError(f"mask {mask.shape} != volume {volume.shape}")
    total = int(np.count_nonzero(mask))
    if total == 0:
        raise EmptyMaskError("subvolume extraction needs a non-empty mask")
    if any(d < side for d in volume.shape):
        raise ShapeError(f"dims {volume.shape} smaller than cube side {side}")
    table = _integral_table(mask != 0)
    anchors = _stride_grid(volume.shape, side, 1)
    counts = box_voxel_counts(table, anchors, side)
    keep = counts >= min_fraction * total - 1e-9
    return anchors[keep]


def balance_examples(examples: list[WindowLabel],
                     rng: np.random.Generator) -> list[WindowLabel]:
    """Undersample the majority label to the minority count, then shuffle."""
    pos = [e for e in examples if e.label == "positive"]
    neg = [e for e in examples if e.label == "negative"]
    n = min(len(pos), len(neg))
    if n == 0:
        return []
    pos = [pos[i] for i in rng.permutation(len(pos))[:n]]
    neg = [neg[i] for i in rng.permutation(len(neg))[:n]]
    merged = pos + neg
    return [merged[i] for i in rng.permutation(len(merged))]


# --------------------------------------------------------------------------
# datasets

@dataclass
class LocalizationDataset:
    """Half-resolution volumes plus labeled window anchors into them."""

    volumes: list[np.ndarray]
    examples: list[tuple[int, tuple[int, int, int], int]]  # (vol idx, anchor, 0/1)
    window: int


@dataclass
class SegmentationDataset:
    """Full-resolution volumes/masks plus qualifying cube anchors."""

    volumes: list[np.ndarray]
    masks: list[np.ndarray]
    anchors: list[tuple[int, tuple[int, int, int]]]  # (vol idx, anchor)
    side: int


def build_localization_dataset(
    volumes_ds: list[np.ndarray], masks_ds: list[np.ndarray], window: int,
    seed: int = 0, *, stride_pos: int = 2, stride_neg: int = 3,
    pos_threshold: float = 0.99, neg_threshold: float = 0.80,
    balance: bool = True,
) -> LocalizationDataset:
    rng = np.random.default_rng(seed)
    examples: list[tuple[int, tuple[int, int, int], int]] = []
    for vi, (vol, msk) in enumerate(zip(volumes_ds, masks_ds)):
        labels = extract_localization_examples(
            vol, msk, window, stride_pos, stride_neg, pos_threshold, neg_threshold
        )
        if balance:
            labels = balance_examples(labels, rng)
        examples.extend(
            (vi, e.anchor, 1 if e.label == "positive" else 0) for e in labels
        )
    order = rng.permutation(len(examples))
    return LocalizationDataset(
        volumes=volumes_ds, examples=[examples[i] for i in order], window=window
    )


def build_segmentation_dataset(
    volumes: list[np.ndarray], masks: list[np.ndarray], side: int,
    min_fraction: float = 0.97,
) -> SegmentationDataset:
    anchors: list[tuple[int, tuple[int, int, int]]] = []
    for vi, (vol, msk) in enumerate(zip(volumes, masks)):
        for anc in extract_segmentation_subvolumes(vol, msk, side, min_fraction):
            anchors.append((vi, tuple(int(v) for v in anc)))
    return SegmentationDataset(volumes=volumes, masks=masks, anchors=anchors,
                               side=side)


# --------------------------------------------------------------------------
# trainers

def _log_step(log, epoch: int, step: int, lr: float, loss: float) -> None:
    if log is not None:
        log.write(f"epoch={epoch} step={step} lr={lr:g} loss={loss:.6f}\n")


def _cube(vol: np.ndarray, anchor, side: int) -> np.ndarray:
    z, y, x = anchor
    return vol[z:z + side, y:y + side, x:x + side]


def train_localization(
    data: LocalizationDataset, cfg: SgdConfig, seed: int = 0, *,
    spec: ClassifierSpec | None = None, w_pos: float = 1.2, w_neg: float = 1.0,
    per_epoch_sample: int | None = None, log=None,
) -> LocalizationNet:
    """Train the window classifier with weighted CE and on-the-fly isometries."""
    cfg.validate()
    if not data.examples:
        raise ConfigError("localization dataset has no examples")
    rng = np.random.default_rng(seed)
    net = LocalizationNet(spec or ClassifierSpec(input_side=data.window),
                          seed=seed)
    state = OptimizerState(net.params())
    w = data.window
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(len(data.examples))
        if per_epoch_sample is not None:
            order = order[: min(per_epoch_sample, len(order))]
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo: lo + cfg.batch_size]
            xs = np.empty((len(batch), 1, w, w, w), dtype=np.float32)
            ys = np.empty(len(batch), dtype=np.int64)
            for j, bi in enumerate(batch):
                vi, anchor, label = data.examples[bi]
                cube = _cube(data.volumes[vi], anchor, w)
                op = sample_augmentation(rng, cube.shape)
                xs[j, 0] = op.apply(cube)
                ys[j] = label
            net.zero_grads()
            logits = net.forward(xs, train=True, rng=rng)
            losses, glogits = weighted_cross_entropy(logits, ys, w_pos, w_neg)
            loss = float(losses.mean())
            if not np.isfinite(loss):
                raise NonFiniteGradientError(f"non-finite loss at step {step + 1}")
            net.backward((glogits / len(batch)).astype(np.float32))
            sgd_step(net.params(), cfg, state, lr)
            step += 1
            _log_step(log, epoch, step, lr, loss)
    return net


def train_segmentation(
    data: SegmentationDataset, cfg: SgdConfig, seed: int = 0, *,
    spec: SegmenterSpec | None = None, per_epoch_sample: int | None = None,
    eps: float = 1e-4, log=None,
) -> SegmentationNet:
    """Train the voxel classifier with the soft-overlap loss.

    Each epoch draws ``per_epoch_sample`` anchors uniformly without
    replacement (all of them when the pool is smaller).
    """
    cfg.validate()
    if not data.anchors:
        raise ConfigError("segmentation dataset has no anchors")
    rng = np.random.default_rng(seed)
    net = SegmentationNet(spec or SegmenterSpec(input_side=data.side), seed=seed)
    state = OptimizerState(net.params())
    s = data.side
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(len(data.anchors))
        if per_epoch_sample is not None:
            order = order[: min(per_epoch_sample, len(order))]
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo: lo + cfg.batch_size]
            xs = np.empty((len(batch), 1, s, s, s), dtype=np.float32)
            ms = np.empty((len(batch), 1, s, s, s), dtype=np.float32)
            for j, bi in enumerate(batch):
                vi, anchor = data.anchors[bi]
                cube = _cube(data.volumes[vi], anchor, s)
                mcube = _cube(data.masks[vi], anchor, s)
                op = sample_augmentation(rng, cube.shape)
                xs[j, 0] = op.apply(cube)
                ms[j, 0] = op.apply(mcube)
            net.zero_grads()
            probs = net.forward(xs, train=True, rng=rng)
            grads = np.empty_like(probs)
            losses = []
            for j in range(len(batch)):
                lj, gj = dice_loss(probs[j], ms[j], eps)
                losses.append(lj)
                grads[j] = gj / len(batch)
            loss = float(np.mean(losses))
            if not np.isfinite(loss):
                raise NonFiniteGradientError(f"non-finite loss at step {step + 1}")
            net.backward(grads)
            sgd_step(net.params(), cfg, state, lr)
            step += 1
            _log_step(log, epoch, step, lr, loss)
    return net
