"""Overlap metrics, box containment, and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import EmptyMaskError, ShapeError

__all__ = [
    "dsc",
    "box_containment",
    "MetricsReport",
    "evaluate",
    "report_to_json_lines",
    "report_from_json_lines",
]

FAILURE_THRESHOLD = 0.6


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap score 2|a∩b| / (|a| + |b|) on binary masks.

    Both masks empty scores 1 (predicting nothing when nothing exists);
    exactly one empty scores 0.  This evaluation convention carries no
    smoothing term; that belongs to the training loss only.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    am = a != 0
    bm = b != 0
    sa = int(am.sum())
    sb = int(bm.sum())
    if sa == 0 and sb == 0:
        return 1.0
    inter = int(np.count_nonzero(am & bm))
    return 2.0 * inter / (sa + sb)


def box_containment(box, mask: np.ndarray) -> float:
    """Fraction of mask voxels that fall inside ``box`` (anchor + side)."""
    total = int(np.count_nonzero(mask))
    if total == 0:
        raise EmptyMaskError("containment is undefined for an empty mask")
    z, y, x = box.anchor
    s = box.side
    inside = int(np.count_nonzero(mask[z:z + s, y:y + s, x:x + s]))
    return inside / total


@dataclass
class MetricsReport:
    per_volume_dsc: list[float]
    mean_dsc: float
    failure_count: int
    failure_threshold: float = FAILURE_THRESHOLD
    containment: list[float] | None = None
    full_containment_count: int | None = None


def evaluate(predictions, ground_truths, boxes=None,
             failure_threshold: float = FAILURE_THRESHOLD) -> MetricsReport:
    """Score prediction masks against ground truth, optionally with boxes."""
    if len(predictions) != len(ground_truths):
        raise ShapeError(
            f"got {len(predictions)} predictions for {len(ground_truths)} truths"
        )
    if boxes is not None and len(boxes) != len(ground_truths):
        raise ShapeError(
            f"got {len(boxes)} boxes for {len(ground_truths)} truths"
        )
    scores = [dsc(p, g) for p, g in zip(predictions, ground_truths)]
    mean = float(np.mean(scores)) if scores else 0.0
    failures = sum(1 for s in scores if s < failure_threshold)
    containment = None
    full_count = None
    if boxes is not None:
        containment = [box_containment(b, g) for b, g in zip(boxes, ground_truths)]
        full_count = sum(1 for c in containment if c == 1.0)
    return MetricsReport(
        per_volume_dsc=scores,
        mean_dsc=mean,
        failure_count=failures,
        failure_threshold=failure_threshold,
        containment=containment,
        full_containment_count=full_count,
    )


def report_to_json_lines(report: MetricsReport) -> str:
    """One JSON record per volume plus a trailing summary record."""
    lines = []
    for i, s in enumerate(report.per_volume_dsc):
        rec = {"record": "volume", "index": i, "dsc": s}
        if report.containment is not None:
            rec["containment"] = report.containment[i]
        lines.append(json.dumps(rec))
    summary = {
        "record": "summary",
        "mean_dsc": report.mean_dsc,
        "failure_count": report.failure_count,
        "failure_threshold": report.failure_threshold,
        "full_containment_count": report.full_containment_count,
    }
    lines.append(json.dumps(summary))
    return "\n".join(lines) + "\n"


def report_from_json_lines(text: str) -> MetricsReport:
    per = []
    containment = []
    summary = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if rec.get("record") == "volume":
            per.append(float(rec["dsc"]))
            if "containment" in rec:
                containment.append(float(rec["containment"]))
        elif rec.get("record") == "summary":
            summary = rec
    if summary is None:
        raise ShapeError("report stream has no summary record")
    return MetricsReport(
        per_volume_dsc=per,
        mean_dsc=float(summary["mean_dsc"]),
        failure_count=int(summary["failure_count"]),
        failure_threshold=float(summary["failure_threshold"]),
        containment=containment if containment else None,
        full_containment_count=(
            None if summary.get("full_containment_count") is None
            else int(summary["full_containment_count"])
        ),
    )
