"""The two network architectures, their builders, and analytic calculators.

``LocalizationNet``
    A VGG-style binary classifier over cubic grayscale windows: eight 3³
    convolutions in four width pairs, 2³ max pooling plus dropout after each
    pair (skipped once the spatial side becomes odd or reaches 4), then two
    linear layers.  Ten weight layers at the default widths.

``SegmentationNet``
    A voxel classifier with two streams.  A shallow full-resolution stream
    (three 7³ convs, residual on the equal-width ones) preserves borders.
    A deep stream downsamples 16× via four stride-2 convs, then stacks
    seven resolution-preserving cross-kernel layers with identity residuals
    to grow the receptive field past the input size at 21/343 of the dense
    parameter cost.  A transpose-conv decoder with concatenation skips and
    1³ projections returns to full resolution, where the two streams fuse
    through two 7³ convs and a 1³ sigmoid head.

Every conv/linear layer is followed by ReLU then BatchNorm (order
switchable to BN-then-ReLU via the spec flag), except each head's final
layer, which must emit raw logits/probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ShapeError
from .tensor_core.layers import (
    BatchNorm,
    Conv3d,
    CrossConv3d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool3d,
    ReLU,
    Sequential,
    Sigmoid,
    TransposeConv3d,
    softmax2,
)

__all__ = [
    "ClassifierSpec",
    "SegmenterSpec",
    "LocalizationNet",
    "SegmentationNet",
    "build_localization_net",
    "build_segmentation_net",
    "count_parameters",
    "receptive_field",
    "rf_chain",
    "forward",
]


# --------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class ClassifierSpec:
    """Window-classifier shape knobs; defaults are the full-scale plan."""

    input_side: int = 64
    conv_channels: tuple[int, ...] = (16, 16, 32, 32, 64, 64, 64, 64)
    hidden: int = 256
    conv_dropout: float = 0.15
    fc_dropout: float = 0.4
    bn_before_relu: bool = False

    def pool_after_pair(self) -> list[bool]:
        """One entry per conv pair: pool when the side is even and > 4."""
        side = self.input_side
        out = []
        for _ in range(len(self.conv_channels) // 2):
            do = side % 2 == 0 and side > 4
            out.append(do)
            if do:
                side //= 2
        return out

    def flat_side(self) -> int:
        side = self.input_side
        for do in self.pool_after_pair():
            if do:
                side //= 2
        return side


@dataclass(frozen=True)
class SegmenterSpec:
    """Segmenter shape knobs; defaults are the full-scale plan."""

    input_side: int = 128
    fullres_channels: int = 8
    deep_channels: tuple[int, ...] = (8, 16, 32, 64, 96)
    lrp_layers: int = 7
    kernel: int = 7
    fusion_channels: int = 16
    bn_before_relu: bool = False

    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.deep_channels[:-1]))


# --------------------------------------------------------------------------
# building blocks

def _act_norm(ch: int, bn_first: bool, name: str) -> list[Layer]:
    if bn_first:
        return [BatchNorm(ch, name=f"{name}.bn"), ReLU(name=f"{name}.relu")]
    return [ReLU(name=f"{name}.relu"), BatchNorm(ch, name=f"{name}.bn")]


class _Block(Layer):
    """conv/cross/transpose + ReLU/BN, optionally wrapped in x + f(x)."""

    def __init__(self, core: Layer, ch_out: int, bn_first: bool,
                 residual: bool, name: str):
        self.name = name
        self.residual = residual
        self.seq = Sequential([core] + _act_norm(ch_out, bn_first, name), name=name)

    def params(self):
        return self.seq.params()

    def buffers(self):
        return self.seq.buffers()

    def cast_(self, dtype):
        self.seq.cast_(dtype)

    def forward(self, x, train=False, rng=None):
        h = self.seq.forward(x, train=train, rng=rng)
        return x + h if self.residual else h

    def backward(self, grad_out):
        gh = self.seq.backward(grad_out)
        return grad_out + gh if self.residual else gh


def _conv_block(in_ch, out_ch, kernel, rng, name, *, bn_first, residual=False,
                stride=1, padding="same"):
    core = Conv3d(in_ch, out_ch, kernel, stride=stride, padding=padding,
                  rng=rng, name=f"{name}.conv")
    return _Block(core, out_ch, bn_first, residual, name)


def _cross_block(ch, kernel, rng, name, *, bn_first):
    core = CrossConv3d(ch, ch, kernel, rng=rng, name=f"{name}.cross")
    return _Block(core, ch, bn_first, residual=True, name=name)


def _tconv_block(in_ch, out_ch, rng, name, *, bn_first):
    core = TransposeConv3d(in_ch, out_ch, rng=rng, name=f"{name}.tconv")
    return _Block(core, out_ch, bn_first, residual=False, name=name)


class _NetBase:
    """Common parameter/state plumbing for both nets."""

    spec = None

    def _all_layers(self) -> list[Layer]:
        raise NotImplementedError

    def params(self):
        return [p for lyr in self._all_layers() for p in lyr.params()]

    def buffers(self):
        return [b for lyr in self._all_layers() for b in lyr.buffers()]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, array) list: parameters then running stats."""
        out = [(p.name, p.value) for p in self.params()]
        out.extend(self.buffers())
        return out

    def zero_grads(self):
        for lyr in self._all_layers():
            lyr.zero_grads()

    def load_state(self, arrays: list[np.ndarray]) -> None:
        state = self.state_arrays()
        if len(arrays) != len(state):
            raise ShapeError(
                f"state arrays: expected {len(state)}, got {len(arrays)}"
            )
        for (name, dst), src in zip(state, arrays):
            if dst.shape != src.shape:
                raise ShapeError(
                    f"{name}: shape {src.shape} does not match {dst.shape}"
                )
            dst[...] = src


# --------------------------------------------------------------------------
# localization classifier

class LocalizationNet(_NetBase):
    def __init__(self, spec: ClassifierSpec, seed: int = 0):
        rng = np.random.default_rng(seed)
        bnf = spec.bn_before_relu
        ch = spec.conv_channels
        if len(ch) % 2:
            raise ShapeError("conv channel plan must pair up")
        layers: list[Layer] = []
        prev = 1
        pools = spec.pool_after_pair()
        for pair, do_pool in enumerate(pools):
            for j in range(2):
                i = pair * 2 + j
                layers.append(
                    _conv_block(prev, ch[i], 3, rng, f"conv{i + 1}", bn_first=bnf)
                )
                prev = ch[i]
            if do_pool:
                layers.append(MaxPool3d(2, name=f"pool{pair + 1}"))
                layers.append(Dropout(spec.conv_dropout, name=f"drop{pair + 1}"))
        layers.append(Flatten())
        flat = ch[-1] * spec.flat_side() ** 3
        layers.append(Linear(flat, spec.hidden, rng=rng, name="fc1"))
        layers.extend(_act_norm(spec.hidden, bnf, "fc1"))
        layers.append(Dropout(spec.fc_dropout, name="fc_drop"))
        layers.append(Linear(spec.hidden, 2, rng=rng, name="fc2"))
        self.spec = spec
        self.trunk = Sequential(layers, name="classifier")

    def _all_layers(self):
        return [self.trunk]

    def _check_input(self, x):
        s = self.spec.input_side
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (s, s, s):
            raise ShapeError(
                f"classifier expects (B,1,{s},{s},{s}), got {x.shape}"
            )

    def forward(self, x, train: bool = False, rng=None):
        self._check_input(x)
        return self.trunk.forward(x, train=train, rng=rng)

    def backward(self, grad_out):
        return self.trunk.backward(grad_out)

    def positive_probability(self, windows: np.ndarray) -> np.ndarray:
        """Eval-mode P(window contains the structure), shape (B,)."""
        logits = self.forward(windows, train=False)
        return softmax2(logits)[:, 1]


# --------------------------------------------------------------------------
# segmentation net

class SegmentationNet(_NetBase):
    def __init__(self, spec: SegmenterSpec, seed: int = 0):
        rng = np.random.default_rng(seed)
        bnf = spec.bn_before_relu
        k = spec.kernel
        fr = spec.fullres_channels
        deep = spec.deep_channels

        self.fullres = [
            _conv_block(1, fr, k, rng, "fullres1", bn_first=bnf),
            _conv_block(fr, fr, k, rng, "fullres2", bn_first=bnf, residual=True),
            _conv_block(fr, fr, k, rng, "fullres3", bn_first=bnf, residual=True),
        ]
        self.deep0 = _conv_block(1, deep[0], k, rng, "deep1", bn_first=bnf)
        self.downs = [
            _conv_block(deep[i], deep[i + 1], 2, rng, f"down{i + 1}",
                        bn_first=bnf, stride=2, padding="valid")
            for i in range(len(deep) - 1)
        ]
        self.lrps = [
            _cross_block(deep[-1], k, rng, f"lrp{i + 1}", bn_first=bnf)
            for i in range(spec.lrp_layers)
        ]
        widths = spec.decoder_widths()
        self.tconvs = []
        self.projs = []
        prev = deep[-1]
        for i, w in enumerate(widths):
            self.tconvs.append(
                _tconv_block(prev, w, rng, f"up{i + 1}", bn_first=bnf)
            )
            self.projs.append(
                _conv_block(2 * w, w, 1, rng, f"proj{i + 1}",
                            bn_first=bnf, padding="valid")
            )
            prev = w
        fuse_in = fr + widths[-1]
        self.fuse1 = _conv_block(fuse_in, spec.fusion_channels, k, rng,
                                 "fuse1", bn_first=bnf)
        self.fuse2 = _conv_block(spec.fusion_channels, spec.fusion_channels,
                                 k, rng, "fuse2", bn_first=bnf)
        self.head = Conv3d(spec.fusion_channels, 1, 1, padding="valid",
                           rng=rng, name="head.conv")
        self.sigmoid = Sigmoid(name="head.sigmoid")
        self.spec = spec
        self._fr_ch = fr

    def _all_layers(self):
        return (self.fullres + [self.deep0] + self.downs + self.lrps
                + self.tconvs + self.projs
                + [self.fuse1, self.fuse2, self.head, self.sigmoid])

    def _check_input(self, x):
        s = self.spec.input_side
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (s, s, s):
            raise ShapeError(
                f"segmenter expects (B,1,{s},{s},{s}), got {x.shape}"
            )

    def forward(self, x, train: bool = False, rng=None):
        self._check_input(x)
        f = x
        for blk in self.fullres:
            f = blk.forward(f, train=train, rng=rng)
        skips = [self.deep0.forward(x, train=train, rng=rng)]
        h = skips[0]
        for blk in self.downs:
            h = blk.forward(h, train=train, rng=rng)
            skips.append(h)
        for blk in self.lrps:
            h = blk.forward(h, train=train, rng=rng)
        for i, (up, proj) in enumerate(zip(self.tconvs, self.projs)):
            h = up.forward(h, train=train, rng=rng)
            skip = skips[-2 - i]
            h = proj.forward(
                np.concatenate([h, skip], axis=1), train=train, rng=rng
            )
        z = np.concatenate([f, h], axis=1)
        z = self.fuse1.forward(z, train=train, rng=rng)
        z = self.fuse2.forward(z, train=train, rng=rng)
        z = self.head.forward(z, train=train, rng=rng)
        return self.sigmoid.forward(z, train=train, rng=rng)

    def backward(self, grad_out):
        g = self.sigmoid.backward(grad_out)
        g = self.head.backward(g)
        g = self.fuse2.backward(g)
        g = self.fuse1.backward(g)
        fr = self._fr_ch
        gf = np.ascontiguousarray(g[:, :fr])
        gh = np.ascontiguousarray(g[:, fr:])

        # Decoder stage i consumed cat(upsampled, skips[n_down - 1 - i]).
        n = len(self.tconvs)
        widths = self.spec.decoder_widths()
        skip_grads: dict[int, np.ndarray] = {}
        for i in range(n - 1, -1, -1):
            gcat = self.projs[i].backward(gh)
            w = widths[i]
            skip_grads[len(self.downs) - 1 - i] = np.ascontiguousarray(gcat[:, w:])
            gh = self.tconvs[i].backward(np.ascontiguousarray(gcat[:, :w]))

        for blk in reversed(self.lrps):
            gh = blk.backward(gh)
        # gh is now the gradient at the deepest encoder output (skips[-1]),
        # which feeds only the cross-kernel stack; walk the encoder back,
        # folding in each resolution's decoder skip gradient.
        for i in range(len(self.downs) - 1, -1, -1):
            gh = self.downs[i].backward(gh)
            gh = gh + skip_grads[i]
        gx = self.deep0.backward(gh)

        for blk in reversed(self.fullres):
            gf = blk.backward(gf)
        return gx + gf

    def probability_map(self, cube: np.ndarray) -> np.ndarray:
        """Eval-mode per-voxel probabilities for one (side³) cube."""
        s = self.spec.input_side
        x = cube.reshape(1, 1, s, s, s).astype(np.float32, copy=False)
        return self.forward(x, train=False)[0, 0]


# --------------------------------------------------------------------------
# builders

def build_localization_net(seed: int = 0,
                           spec: ClassifierSpec | None = None) -> LocalizationNet:
    return LocalizationNet(spec or ClassifierSpec(), seed)


def build_segmentation_net(seed: int = 0,
                           spec: SegmenterSpec | None = None) -> SegmentationNet:
    return SegmentationNet(spec or SegmenterSpec(), seed)


# --------------------------------------------------------------------------
# analytic calculators

def count_parameters(net, mode: str = "actual"):
    """Per-layer and total learnable-parameter counts.

    ``dense_equivalent`` prices each cross kernel as if it were a dense
    k³ kernel (k³ instead of 3k weights per channel pair); everything else
    is unchanged.
    """
    if mode not in ("actual", "dense_equivalent"):
        raise ValueError(f"mode must be actual|dense_equivalent, got {mode!r}")
    groups: dict[str, int] = {}
    for p in net.params():
        n = p.size
        if mode == "dense_equivalent" and p.name.endswith((".wz", ".wy", ".wx")):
            o, i, k = p.value.shape
            # price the whole k^3 kernel once, on the z-line entry
            n = o * i * k ** 3 if p.name.endswith(".wz") else 0
        top = p.name.split(".", 1)[0]
        groups[top] = groups.get(top, 0) + n
    rows = list(groups.items())
    total = sum(n for _, n in rows)
    return rows, total


def rf_chain(stages: list[tuple[int, int]], rf: int = 1, jump: int = 1):
    """Receptive-field recurrence over (kernel, stride) stages.

    rf <- rf + (kernel - 1) * jump;  jump <- jump * stride.
    """
    for k, s in stages:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


def receptive_field(net) -> dict:
    """Per-axis receptive field and stride at the named probe points.

    Only the deep stream is walked (skips do not change the recurrence).
    All kernels are cubic so one number per probe covers every axis.
    """
    if isinstance(net, LocalizationNet):
        spec = net.spec
        stages: list[tuple[int, int]] = []
        for do_pool in spec.pool_after_pair():
            stages += [(3, 1), (3, 1)]
            if do_pool:
                stages.append((2, 2))
        rf, jump = rf_chain(stages)
        return {"conv_trunk": {"rf": rf, "stride": jump}, "head": "global (linear)"}
    if isinstance(net, SegmentationNet):
        spec = net.spec
        k = spec.kernel
        stages = [(k, 1)]
        stages += [(2, 2)] * len(spec.decoder_widths())
        stages += [(k, 1)] * spec.lrp_layers
        rf, jump = rf_chain(stages)
        frac_rf = Fraction(rf)
        frac_jump = Fraction(jump)
        for _ in spec.decoder_widths():
            # transpose conv, kernel 2, effective stride 1/2
            frac_jump /= 2
            frac_rf += (2 - 1) * frac_jump
        # fusion convs and the 1x1x1 head run at full resolution
        frac_rf += 2 * (k - 1) * frac_jump
        return {
            "deep_stream": {"rf": rf, "stride": jump},
            "fusion_head": {
                "rf": int(frac_rf) if frac_rf.denominator == 1 else float(frac_rf),
                "stride": int(frac_jump) if frac_jump.denominator == 1 else float(frac_jump),
            },
        }
    raise TypeError(f"unsupported net type {type(net).__name__}")


def forward(net, x, mode: str = "eval", seed: int = 0):
    """Run a net deterministically: dropout seeded, BN per the mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    rng = np.random.default_rng(seed)
    return net.forward(x, train=(mode == "train"), rng=rng)
