"""Convolutional-experts local detector: ROI in, probabilistic response map out.

The network is a fixed four-stage chain (channel counts configurable, with
paper-scale defaults of 500/200/100):

  1. contrast-normalizing correlation layer: every 11x11 input window is
     Z-score normalized before the dot product with each kernel;
  2. 1x1 ReLU layer;
  3. 1x1 sigmoid layer whose channels act as individual alignment experts;
  4. non-negative combination of the expert votes followed by a sigmoid.

Because stage 1 normalizes each window, the whole detector is exactly
invariant to affine intensity changes of the ROI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from clmfit import kernels as _kernels
from clmfit.errors import ModelFormatError

KERNEL_SIZE = 11
ZNORM_EPS = _kernels.ZNORM_EPS
DEFAULT_CHANNELS = (500, 200, 100)


@dataclass(frozen=True)
class CenModel:
    """Weights of one detector (one landmark at one view and one scale).

    ``scale_px`` is the interocular distance, in pixels, of the faces the
    detector was trained on.
    """

    kernels: np.ndarray  # (c1, 11, 11)
    bias1: np.ndarray  # (c1,)
    w2: np.ndarray  # (c2, c1)
    b2: np.ndarray  # (c2,)
    w3: np.ndarray  # (c3, c2)
    b3: np.ndarray  # (c3,)
    combiner_w: np.ndarray  # (c3,) non-negative
    combiner_b: float
    landmark: int = 0
    view: int = 0
    scale_px: int = 30

    def __post_init__(self):
        for name in ("kernels", "bias1", "w2", "b2", "w3", "b3", "combiner_w"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=np.float64)
            )
        object.__setattr__(self, "combiner_b", float(self.combiner_b))
        c1, kh, kw = self.kernels.shape
        if (kh, kw) != (KERNEL_SIZE, KERNEL_SIZE):
            raise ValueError(
                f"kernel spatial size must be {KERNEL_SIZE}x{KERNEL_SIZE}, got {kh}x{kw}"
            )
        c2, c3 = self.w2.shape[0], self.w3.shape[0]
        if self.bias1.shape != (c1,):
            raise ValueError("bias1 shape does not match kernel count")
        if self.w2.shape != (c2, c1) or self.b2.shape != (c2,):
            raise ValueError("stage-2 weight shapes inconsistent")
        if self.w3.shape != (c3, c2) or self.b3.shape != (c3,):
            raise ValueError("stage-3 weight shapes inconsistent")
        if self.combiner_w.shape != (c3,):
            raise ValueError("combiner weight count does not match expert count")

    @property
    def channels(self) -> tuple[int, int, int]:
        return (self.kernels.shape[0], self.w2.shape[0], self.w3.shape[0])

    @property
    def has_nonneg_combiner(self) -> bool:
        return bool(np.all(self.combiner_w >= 0))


def validate_nonneg(model: CenModel) -> None:
    """Enforce the non-negative combiner invariant (the mixture-of-experts rule)."""
    if not model.has_nonneg_combiner:
        bad = int(np.argmin(model.combiner_w))
        raise ModelFormatError(
            f"combiner weight {bad} is negative ({model.combiner_w[bad]:.6g}); "
            "detector banks require non-negative expert weights"
        )


@dataclass(frozen=True)
class ResponseMap:
    """Square grid of alignment probabilities anchored in image coordinates.

    ``origin`` is the image-pixel position of grid cell (0, 0) (stored as
    (x, y)) and ``step`` the image-pixel spacing between adjacent cells at
    the working scale.
    """

    values: np.ndarray
    origin: np.ndarray
    step: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise ValueError(f"response map must be square, got {vals.shape}")
        if vals.size == 0:
            raise ValueError("response map is empty")
        if vals.min() < -1e-9 or vals.max() > 1.0 + 1e-9:
            raise ValueError("response values must lie in [0, 1]")
        object.__setattr__(self, "values", np.clip(vals, 0.0, 1.0))
        object.__setattr__(
            self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(2)
        )
        object.__setattr__(self, "step", float(self.step))
        if self.step <= 0:
            raise ValueError("step must be positive")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def grid_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Image-space x and y coordinates of the cell centers (1-D each)."""
        idx = np.arange(self.size)
        return self.origin[0] + idx * self.step, self.origin[1] + idx * self.step

    def clamp_point(self, point) -> np.ndarray:
        """Clamp an image-space point into the grid extent."""
        point = np.asarray(point, dtype=np.float64).reshape(2)
        hi = self.origin + (self.size - 1) * self.step
        return np.clip(point, self.origin, hi)

    def sample(self, point) -> float:
        """Bilinear probability at an image-space point, clamped to the grid."""
        p = (self.clamp_point(point) - self.origin) / self.step
        x0 = int(np.floor(p[0]))
        y0 = int(np.floor(p[1]))
        x0 = min(max(x0, 0), self.size - 2) if self.size > 1 else 0
        y0 = min(max(y0, 0), self.size - 2) if self.size > 1 else 0
        if self.size == 1:
            return float(self.values[0, 0])
        fx = p[0] - x0
        fy = p[1] - y0
        v = self.values
        return float(
            v[y0, x0] * (1 - fx) * (1 - fy)
            + v[y0, x0 + 1] * fx * (1 - fy)
            + v[y0 + 1, x0] * (1 - fx) * fy
            + v[y0 + 1, x0 + 1] * fx * fy
        )


def znorm_correlate(roi, model: CenModel) -> np.ndarray:
    """Stage 1: Z-score-normalized correlation of every ROI window.

    Returns a (c1, n-10, n-10) feature map. Zero-variance windows normalize
    to the zero vector, so a constant ROI produces the biases alone.
    """
    roi = np.asarray(roi, dtype=np.float64)
    if roi.ndim != 2:
        raise ValueError("ROI must be a 2-D array")
    if min(roi.shape) < KERNEL_SIZE:
        raise ValueError(f"ROI {roi.shape} is smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} kernel")
    if not np.all(np.isfinite(roi)):
        raise ValueError("ROI contains non-finite values")
    return _kernels.znorm_correlate(roi, model.kernels, model.bias1, ZNORM_EPS)


def combine_experts(model: CenModel, experts: np.ndarray) -> np.ndarray:
    """Stage 4: non-negative combination of expert votes plus final sigmoid.

    ``experts`` has the expert axis last; combination is monotone in every
    expert whenever the combiner weights are non-negative.
    """
    return expit(experts @ model.combiner_w + model.combiner_b)


def response_map(roi, model: CenModel, origin=(0.0, 0.0), step: float = 1.0) -> ResponseMap:
    """Full forward pass producing an alignment-probability map.

    ``origin`` and ``step`` describe where the caller placed the ROI in image
    coordinates; they are attached to the result unchanged.
    """
    feat = znorm_correlate(roi, model)
    c1, oh, ow = feat.shape
    h1 = feat.reshape(c1, -1).T  # (pixels, c1)
    h2 = np.maximum(h1 @ model.w2.T + model.b2, 0.0)
    experts = expit(h2 @ model.w3.T + model.b3)
    probs = combine_experts(model, experts).reshape(oh, ow)
    return ResponseMap(probs, origin=origin, step=step)


def mirrored_response_map(
    roi, model: CenModel, origin=(0.0, 0.0), step: float = 1.0
) -> ResponseMap:
    """Evaluate a detector as its horizontal mirror image.

    Serves a negative-yaw view from the matching positive-yaw model: the ROI
    is flipped left-right, evaluated normally, and the resulting map flipped
    back. Window normalization and the per-pixel stages commute with the
    flip, so this equals a detector whose kernels were mirrored.
    """
    roi = np.asarray(roi, dtype=np.float64)
    flipped = response_map(roi[:, ::-1], model)
    return ResponseMap(flipped.values[:, ::-1], origin=origin, step=step)
