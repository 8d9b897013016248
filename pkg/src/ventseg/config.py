"""Single source of truth for every tunable constant.

``RunConfig.full()`` carries the reference operating point (128³ boxes,
64³ half-resolution windows, probability thresholds 0.95/0.92, minimum
component 300, SGD 0.01/0.9/1e-5 over 5 epochs with a 0.1 decay after
epoch 3, batch sizes 200/4, 22k segmentation samples per epoch).
``RunConfig.desk()`` rescales the geometry and budgets so the whole
two-stage study runs on a single desktop CPU core in minutes; it changes
sizes only, never rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .data.phantom import PhantomConfig
from .errors import ConfigError
from .nets import ClassifierSpec, SegmenterSpec
from .training import SgdConfig

__all__ = ["RunConfig", "parse_config_file", "apply_overrides"]


@dataclass
class RunConfig:
    profile: str = "full"
    seed: int = 0

    # pipeline geometry and decision rules
    window: int = 64                # half-resolution classifier window side
    box_side: int = 128             # full-resolution segmentation cube side
    scan_stride: int = 3
    loc_threshold: float = 0.95
    seg_threshold: float = 0.92
    min_component: int = 300

    # training-example extraction
    stride_pos: int = 2
    stride_neg: int = 3
    pos_threshold: float = 0.99
    neg_threshold: float = 0.80
    subvolume_min_fraction: float = 0.97

    # optimization (per stage; the reference point uses 0.01 for both,
    # the desk profile raises the voxel-classifier rate to compensate for
    # its ~100x smaller step budget)
    loc_learning_rate: float = 0.01
    seg_learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 5
    lr_decay: float = 0.1
    decay_after_epoch: int = 3
    loc_batch: int = 200
    seg_batch: int = 4
    loc_per_epoch: int | None = None      # None = use every example
    seg_per_epoch: int | None = 22000
    w_pos: float = 1.2
    w_neg: float = 1.0

    # study sizes (phantom experiments)
    n_train: int = 40
    n_test: int = 20

    # architecture recipes
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    segmenter: SegmenterSpec = field(default_factory=SegmenterSpec)

    # synthetic data
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.classifier.input_side != self.window:
            raise ConfigError(
                f"classifier input side {self.classifier.input_side} "
                f"must equal the window side {self.window}"
            )
        if self.segmenter.input_side != self.box_side:
            raise ConfigError(
                f"segmenter input side {self.segmenter.input_side} "
                f"must equal the box side {self.box_side}"
            )
        if self.box_side != 2 * self.window:
            raise ConfigError(
                f"box side {self.box_side} must be twice the half-resolution "
                f"window {self.window}"
            )
        if not (0 < self.loc_threshold < 1 and 0 < self.seg_threshold < 1):
            raise ConfigError("probability thresholds must lie in (0, 1)")
        if self.min_component < 0 or self.scan_stride < 1:
            raise ConfigError("min_component must be >= 0 and scan stride >= 1")
        self.sgd_localization().validate()
        self.sgd_segmentation().validate()

    # ---- profiles ----------------------------------------------------

    @classmethod
    def full(cls, seed: int = 0) -> "RunConfig":
        return cls(profile="full", seed=seed)

    @classmethod
    def desk(cls, seed: int = 0) -> "RunConfig":
        return cls(
            profile="desk",
            seed=seed,
            window=24,
            box_side=48,
            min_component=16,
            loc_batch=32,
            loc_per_epoch=1280,
            seg_per_epoch=192,
            seg_learning_rate=0.2,
            n_train=40,
            n_test=20,
            classifier=ClassifierSpec(
                input_side=24,
                conv_channels=(4, 4, 8, 8, 16, 16, 16, 16),
                hidden=64,
            ),
            segmenter=SegmenterSpec(
                input_side=48,
                fullres_channels=4,
                deep_channels=(4, 8, 16, 24, 32),
                fusion_channels=8,
            ),
            phantom=PhantomConfig(
                dims_low=(96, 96, 96),
                dims_high=(96, 96, 96),
                max_extent=36,
                motion_max_shift=3,
            ),
        )

    @classmethod
    def for_profile(cls, name: str, seed: int = 0) -> "RunConfig":
        if name == "full":
            return cls.full(seed)
        if name == "desk":
            return cls.desk(seed)
        raise ConfigError(f"unknown profile {name!r} (expected 'full' or 'desk')")

    # ---- derived views -----------------------------------------------

    def sgd_localization(self) -> SgdConfig:
        return SgdConfig(
            learning_rate=self.loc_learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            lr_decay=self.lr_decay,
            decay_after_epoch=self.decay_after_epoch,
            batch_size=self.loc_batch,
        )

    def sgd_segmentation(self) -> SgdConfig:
        return SgdConfig(
            learning_rate=self.seg_learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            lr_decay=self.lr_decay,
            decay_after_epoch=self.decay_after_epoch,
            batch_size=self.seg_batch,
        )

    @property
    def min_side(self) -> int:
        """Every volume is zero-padded up to the box side before inference."""
        return self.box_side


_OVERRIDE_DEPENDENTS = {
    # rescaling the geometry keeps the architecture recipes consistent
    "window": lambda cfg, v: replace(cfg.classifier, input_side=v),
    "box_side": lambda cfg, v: replace(cfg.segmenter, input_side=v),
}

_SIMPLE_FIELDS = {
    f.name: f.type
    for f in fields(RunConfig)
    if f.name not in ("classifier", "segmenter", "phantom")
}


def _convert(name: str, raw: str):
    kind = _SIMPLE_FIELDS[name]
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("int | None", "Optional[int]"):
        return None if raw.lower() in ("none", "") else int(raw)
    return raw  # strings (profile)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply key=value overrides onto a config; unknown keys rejected."""
    updates = {}
    for key, raw in overrides.items():
        if key not in _SIMPLE_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _convert(key, raw)
    for key, fn in _OVERRIDE_DEPENDENTS.items():
        if key in updates:
            if key == "window":
                updates["classifier"] = fn(cfg, updates[key])
            else:
                updates["segmenter"] = fn(cfg, updates[key])
    return replace(cfg, **updates)


def parse_config_file(path: str) -> dict[str, str]:
    """Plain-text ``key=value`` lines; ``#`` comments and blanks ignored."""
    overrides: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            overrides[key.strip()] = value.strip()
    return overrides
