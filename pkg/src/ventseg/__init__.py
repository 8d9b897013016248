"""Two-stage volumetric segmentation of small structures in noisy 3D scans.

A window classifier scans the half-resolution volume to locate a cube
around the target, then a voxel classifier with a cross-constrained
large-kernel deep stream and a full-resolution stream segments inside the
cube; small 26-connected components are filtered from the result.  All
numerics are hand-rolled on numpy with analytic gradients throughout.

Subpackages and modules:

- ``tensor_core`` — differentiable 3D ops (conv, pooling, norm, linear)
- ``nets`` — the two architectures plus parameter/receptive-field calculators
- ``training`` — losses, SGD, schedules, augmentation, example extraction
- ``pipeline`` — sliding-window localization, OR-ensemble segmentation
- ``data`` — volume container I/O, phantom generator, metrics, slice export
- ``checkpoint`` — bit-exact net serialization
- ``config`` — every tunable constant, with full/desk profiles
- ``cli`` — the ``ventseg`` command
"""

from .config import RunConfig
from .checkpoint import load_net, save_net
from .data import (
    PhantomConfig,
    Volume,
    dsc,
    evaluate,
    generate_phantom,
    read_volume,
    write_volume,
)
from .nets import (
    ClassifierSpec,
    LocalizationNet,
    SegmentationNet,
    SegmenterSpec,
    build_localization_net,
    build_segmentation_net,
    count_parameters,
    receptive_field,
)
from .pipeline import (
    BoundingBox,
    localize,
    remove_small_components,
    segment_box,
    segment_end_to_end,
)
from .training import (
    SgdConfig,
    train_localization,
    train_segmentation,
)

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_net",
    "save_net",
    "PhantomConfig",
    "Volume",
    "dsc",
    "evaluate",
    "generate_phantom",
    "read_volume",
    "write_volume",
    "ClassifierSpec",
    "SegmenterSpec",
    "LocalizationNet",
    "SegmentationNet",
    "build_localization_net",
    "build_segmentation_net",
    "count_parameters",
    "receptive_field",
    "BoundingBox",
    "localize",
    "remove_small_components",
    "segment_box",
    "segment_end_to_end",
    "SgdConfig",
    "train_localization",
    "train_segmentation",
    "__version__",
]
