"""Volume container I/O, phantom generation, metrics, and slice export."""

from .io import HEADER_SIZE, MAGIC, Volume, read_volume, write_volume
from .metrics import (
    FAILURE_THRESHOLD,
    MetricsReport,
    box_containment,
    dsc,
    evaluate,
    report_from_json_lines,
    report_to_json_lines,
)
from .phantom import PhantomConfig, generate_phantom
from .slices import export_slice, read_pgm, slice_to_u8, write_pgm

__all__ = [
    "HEADER_SIZE",
    "MAGIC",
    "Volume",
    "read_volume",
    "write_volume",
    "FAILURE_THRESHOLD",
    "MetricsReport",
    "box_containment",
    "dsc",
    "evaluate",
    "report_from_json_lines",
    "report_to_json_lines",
    "PhantomConfig",
    "generate_phantom",
    "export_slice",
    "read_pgm",
    "slice_to_u8",
    "write_pgm",
]
