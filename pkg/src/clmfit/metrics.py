"""Size-normalized landmark errors, medians, and cumulative error curves.

The headline statistic is the median of per-image normalized errors (the
mean is too sensitive to outliers). Errors are normalized either by the
interocular distance (frontal-face protocols) or by the average of the
ground-truth face width and height (profile-tolerant protocols).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from clmfit.pdm import LandmarkSet

IOD = "iod"
FACE_SIZE = "size"


def normalized_error(
    pred: LandmarkSet,
    truth: LandmarkSet,
    mode: str = IOD,
    eye_indices: tuple[int, int] | None = None,
) -> float:
    """Mean distance over commonly-visible landmarks, divided by face size.

    ``mode`` selects the normalizer: interocular distance between the
    ``eye_indices`` landmarks of the ground truth, or the average of the
    ground-truth bounding-box width and height.
    """
    if len(pred) != len(truth):
        raise ValueError(
            f"landmark counts differ: {len(pred)} predicted vs {len(truth)} true"
        )
    common = pred.visibility & truth.visibility
    if not common.any():
        raise ValueError("no commonly visible landmarks")
    dists = np.linalg.norm(pred.points[common] - truth.points[common], axis=1)
    if mode == IOD:
        if eye_indices is None:
            raise ValueError("IOD mode needs eye-corner landmark indices")
        i, j = eye_indices
        norm = float(np.linalg.norm(truth.points[i] - truth.points[j]))
    elif mode == FACE_SIZE:
        lo = truth.points.min(axis=0)
        hi = truth.points.max(axis=0)
        norm = float((hi[0] - lo[0]) + (hi[1] - lo[1])) / 2.0
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if norm <= 0:
        raise ValueError("zero normalizer")
    return float(dists.mean()) / norm


def cumulative_curve(errors, thresholds) -> list[tuple[float, float]]:
    """Fraction of errors at or below each threshold."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("empty error list")
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    return [(t, float(np.mean(errors <= t))) for t in thresholds]


@dataclass(frozen=True)
class ErrorReport:
    per_image_errors: list[float]
    median: float
    curve: list[tuple[float, float]]

    def __post_init__(self):
        fracs = [f for _, f in self.curve]
        if any(b < a for a, b in zip(fracs, fracs[1:])):
            raise ValueError("curve fractions must be non-decreasing")
        if fracs and (min(fracs) < 0 or max(fracs) > 1):
            raise ValueError("curve fractions must lie in [0, 1]")
        if self.per_image_errors and not np.isclose(
            self.median, float(np.median(self.per_image_errors))
        ):
            raise ValueError("median does not match the error list")

    @classmethod
    def build(cls, errors, thresholds) -> "ErrorReport":
        errors = [float(e) for e in errors]
        return cls(
            per_image_errors=errors,
            median=float(np.median(errors)),
            curve=cumulative_curve(errors, thresholds),
        )


def write_curve_csv(curve, path) -> None:
    with open(path, "w") as f:
        f.write("threshold,fraction\n")
        for t, frac in curve:
            f.write(f"{float(t)!r},{float(frac)!r}\n")


def write_report_json(report: ErrorReport, mode: str, path) -> None:
    with open(path, "w") as f:
        json.dump(
            {
                "median": report.median,
                "count": len(report.per_image_errors),
                "mode": mode,
            },
            f,
        )
        f.write("\n")
