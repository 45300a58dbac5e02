"""Image containers and intensity transforms.

Everything downstream works on two currencies: float scalar grids
(raw concentration, SUV, or normalized to [0, 1]) and integer label
maps. The normalization is an arcsinh compression followed by a
global min-max rescale, and it is exactly invertible back to SUV as
long as the bounds are kept with the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# unit tags for ScalarGrid2D
UNIT_RAW = "raw"
UNIT_SUV = "suv"
UNIT_NORM = "normalized"
_UNITS = (UNIT_RAW, UNIT_SUV, UNIT_NORM)


class PadkitError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(PadkitError, ValueError):
    pass


class ShapeError(PadkitError, ValueError):
    pass


@dataclass(frozen=True)
class ScalarGrid2D:
    """A single 2-D floating point image slice.

    `values` is (height, width) float64, row-major. `unit` records what
    the numbers mean: raw Bq/mL, SUV g/mL, or unitless normalized.
    """

    values: np.ndarray
    unit: str = UNIT_RAW

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"scalar grid must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("scalar grid contains non-finite values")
        if self.unit not in _UNITS:
            raise InvalidParameterError(f"unknown unit tag {self.unit!r}")
        if self.unit == UNIT_NORM and (v.min() < 0.0 or v.max() > 1.0):
            raise InvalidParameterError("normalized grid values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LabelGrid2D:
    """A 2-D integer label map; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ShapeError(f"label grid must be 2-D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            lab = lab.astype(np.int32)
        if lab.min(initial=0) < 0:
            raise InvalidParameterError("labels must be non-negative")
        object.__setattr__(self, "labels", lab.astype(np.int32))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def present_labels(self) -> np.ndarray:
        """Sorted nonzero label ids present in the map."""
        ids = np.unique(self.labels)
        return ids[ids > 0]


DEFAULT_SUV_THRESHOLD = 0.76
DEFAULT_SUV_CAP = 50.0


@dataclass(frozen=True)
class NormalizationParams:
    """Parameters of the invertible intensity normalization.

    `c` is the arcsinh threshold: values below c respond roughly
    linearly, values far above are compressed logarithmically.
    `lo`/`hi` are the global min-max bounds in arcsinh space; they are
    dataset-global so that SUV recovery stays well-posed across a
    population (per-image bounds would not be).
    """

    c: float = DEFAULT_SUV_THRESHOLD
    lo: float = 0.0
    hi: float = field(default=math.asinh(DEFAULT_SUV_CAP / DEFAULT_SUV_THRESHOLD))

    def __post_init__(self):
        if not (self.c > 0):
            raise InvalidParameterError(f"arcsinh threshold must be > 0, got {self.c}")
        if not (self.hi > self.lo):
            raise InvalidParameterError(f"need hi > lo, got lo={self.lo}, hi={self.hi}")

    @staticmethod
    def from_suv_cap(suv_cap: float = DEFAULT_SUV_CAP, c: float = DEFAULT_SUV_THRESHOLD) -> "NormalizationParams":
        """Bounds [0, arcsinh(suv_cap / c)], the default global window."""
        if not (suv_cap > 0):
            raise InvalidParameterError("suv_cap must be > 0")
        return NormalizationParams(c=c, lo=0.0, hi=math.asinh(suv_cap / c))

    def to_dict(self) -> dict:
        return {"c": self.c, "lo": self.lo, "hi": self.hi}

    @staticmethod
    def from_dict(d: dict) -> "NormalizationParams":
        return NormalizationParams(c=float(d["c"]), lo=float(d["lo"]), hi=float(d["hi"]))


def to_suv(grid: ScalarGrid2D, weight_g: float, dose_bq: float) -> ScalarGrid2D:
    """Convert raw tracer concentration (Bq/mL) to standardized uptake value.

    SUV = concentration * body_weight / injected_dose. Decay correction
    is assumed to have been applied upstream.
    """
    if grid.unit != UNIT_RAW:
        raise InvalidParameterError(f"to_suv expects a raw grid, got unit {grid.unit!r}")
    if not (weight_g > 0):
        raise InvalidParameterError(f"weight must be > 0, got {weight_g}")
    if not (dose_bq > 0):
        raise InvalidParameterError(f"dose must be > 0, got {dose_bq}")
    return ScalarGrid2D(grid.values * (weight_g / dose_bq), unit=UNIT_SUV)


def arcsinh_normalize(grid: ScalarGrid2D, params: NormalizationParams) -> ScalarGrid2D:
    """Map SUV to [0, 1]: arcsinh(x / c), then min-max rescale by (lo, hi).

    Values outside the global window are clamped.
    """
    if grid.unit != UNIT_SUV:
        raise InvalidParameterError(f"arcsinh_normalize expects an SUV grid, got {grid.unit!r}")
    y = np.arcsinh(grid.values / params.c)
    y = (y - params.lo) / (params.hi - params.lo)
    return ScalarGrid2D(np.clip(y, 0.0, 1.0), unit=UNIT_NORM)


def denormalize(grid: ScalarGrid2D, params: NormalizationParams) -> ScalarGrid2D:
    """Exact inverse of arcsinh_normalize for values that were not clamped."""
    if grid.unit != UNIT_NORM:
        raise InvalidParameterError(f"denormalize expects a normalized grid, got {grid.unit!r}")
    y = params.lo + grid.values * (params.hi - params.lo)
    return ScalarGrid2D(params.c * np.sinh(y), unit=UNIT_SUV)


def area_downsample(grid: ScalarGrid2D, factor: int) -> ScalarGrid2D:
    """Downsample by averaging non-overlapping factor x factor blocks.

    Preserves the global mean exactly; height and width must be divisible
    by the factor.
    """
    if factor < 1:
        raise InvalidParameterError(f"downsample factor must be >= 1, got {factor}")
    h, w = grid.height, grid.width
    if h % factor or w % factor:
        raise ShapeError(f"shape ({h}, {w}) not divisible by factor {factor}")
    v = grid.values.reshape(h // factor, factor, w // factor, factor)
    return ScalarGrid2D(v.mean(axis=(1, 3)), unit=grid.unit)


def centered_window(mask: LabelGrid2D, target: int) -> tuple[int, int]:
    """Top-left corner of a target x target window centered on the mask centroid.

    The window is shifted as needed to stay inside the grid. An empty
    mask falls back to the image center.
    """
    h, w = mask.height, mask.width
    if target > min(h, w):
        raise ShapeError(f"crop target {target} exceeds grid shape ({h}, {w})")
    rows, cols = np.nonzero(mask.labels)
    if rows.size == 0:
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    else:
        cr, cc = rows.mean(), cols.mean()
    r0 = int(round(cr)) - target // 2
    c0 = int(round(cc)) - target // 2
    r0 = min(max(r0, 0), h - target)
    c0 = min(max(c0, 0), w - target)
    return r0, c0


def crop_centered(grid: ScalarGrid2D, body_mask: LabelGrid2D, target: int) -> ScalarGrid2D:
    """Crop a target x target window centered on the body-mask centroid."""
    if (grid.height, grid.width) != (body_mask.height, body_mask.width):
        raise ShapeError("grid and mask shapes differ")
    r0, c0 = centered_window(body_mask, target)
    return ScalarGrid2D(grid.values[r0:r0 + target, c0:c0 + target].copy(), unit=grid.unit)


def crop_centered_labels(labels: LabelGrid2D, body_mask: LabelGrid2D, target: int) -> LabelGrid2D:
    """Same window placement as crop_centered, applied to a label map."""
    if (labels.height, labels.width) != (body_mask.height, body_mask.width):
        raise ShapeError("label and mask shapes differ")
    r0, c0 = centered_window(body_mask, target)
    return LabelGrid2D(labels.labels[r0:r0 + target, c0:c0 + target].copy())
