"""Lumpy heterogeneity fields, simulated tumors, and a threshold segmenter.

Tumors are built as rotated ellipses with a random lumpy internal
texture and inserted in image space: the lesion increment is computed
from the local background mean and smoothed with an isotropic Gaussian
PSF. The increment depends only on (spec, seed, background mean), which
is what makes paired insertion into two different backgrounds a fair
comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .imagekit import InvalidParameterError, LabelGrid2D, ScalarGrid2D

# FWHM = 2*sqrt(2*ln 2) * sigma for a Gaussian
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class PlacementError(InvalidParameterError):
    pass


class InsertionError(InvalidParameterError):
    pass


@dataclass(frozen=True)
class LumpyParams:
    """Gaussian lumpy field: Poisson-many isotropic blobs at random centers."""

    mean_lump_count: float
    lump_sigma: float
    magnitude: float

    def __post_init__(self):
        if not (self.mean_lump_count > 0 and self.lump_sigma > 0 and self.magnitude >= 0):
            raise InvalidParameterError(f"invalid lumpy parameters {self}")


@dataclass(frozen=True)
class TumorSpec:
    """Geometry and contrast of one simulated lesion."""

    center: tuple[float, float]          # (row, col) in pixel coordinates
    radii: tuple[float, float]           # (r_major, r_minor) in pixels
    rotation: float                      # radians, major axis vs. row direction
    sbr: float                           # signal-to-background ratio, > 1
    lumpy: LumpyParams
    psf_fwhm: float                      # pixels; 0 disables smoothing

    def __post_init__(self):
        if not (self.radii[0] > 0 and self.radii[1] > 0):
            raise InvalidParameterError(f"radii must be > 0, got {self.radii}")
        if not (self.sbr > 1):
            raise InvalidParameterError(f"sbr must exceed 1, got {self.sbr}")
        if self.psf_fwhm < 0:
            raise InvalidParameterError("psf_fwhm must be >= 0")

    def to_json(self) -> str:
        d = asdict(self)
        d["center"] = list(self.center)
        d["radii"] = list(self.radii)
        return json.dumps(d)

    @staticmethod
    def from_json(text: str) -> "TumorSpec":
        d = json.loads(text)
        return TumorSpec(
            center=tuple(d["center"]),
            radii=tuple(d["radii"]),
            rotation=float(d["rotation"]),
            sbr=float(d["sbr"]),
            lumpy=LumpyParams(**d["lumpy"]),
            psf_fwhm=float(d["psf_fwhm"]),
        )


def gaussian_lumpy(shape: tuple[int, int], params: LumpyParams, rng: np.random.Generator) -> np.ndarray:
    """Sample a Gaussian lumpy field on a pixel grid.

    K ~ Poisson(mean_lump_count) blobs of amplitude `magnitude` and width
    `lump_sigma`, centers uniform over the grid footprint. Pixel centers
    sit at integer coordinates; the footprint extends half a pixel past
    them on each side so edges are treated symmetrically.
    """
    h, w = shape
    field = np.zeros((h, w), dtype=np.float64)
    if params.magnitude == 0.0:
        # still consume the same random draws so seeds stay comparable
        k = rng.poisson(params.mean_lump_count)
        rng.uniform(-0.5, h - 0.5, size=k)
        rng.uniform(-0.5, w - 0.5, size=k)
        return field
    k = rng.poisson(params.mean_lump_count)
    centers_r = rng.uniform(-0.5, h - 0.5, size=k)
    centers_c = rng.uniform(-0.5, w - 0.5, size=k)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    inv2s2 = 1.0 / (2.0 * params.lump_sigma ** 2)
    for cr, cc in zip(centers_r, centers_c):
        field += np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) * inv2s2)
    return params.magnitude * field


def lumpy_mean_expectation(shape: tuple[int, int], params: LumpyParams) -> float:
    """Analytic expectation of the grid mean (interior-dominated regime)."""
    h, w = shape
    return params.mean_lump_count * params.magnitude * 2.0 * math.pi * params.lump_sigma ** 2 / (h * w)


def make_tumor_mask(shape: tuple[int, int], spec: TumorSpec) -> LabelGrid2D:
    """Rasterize the rotated ellipse: a pixel belongs if its center is inside."""
    h, w = shape
    cr, cc = spec.center
    if not (0 <= cr < h and 0 <= cc < w):
        raise PlacementError(f"tumor center {spec.center} outside grid {shape}")
    rows = np.arange(h, dtype=np.float64)[:, None] - cr
    cols = np.arange(w, dtype=np.float64)[None, :] - cc
    cos_t, sin_t = math.cos(spec.rotation), math.sin(spec.rotation)
    u = rows * cos_t + cols * sin_t       # along major axis
    v = -rows * sin_t + cols * cos_t      # along minor axis
    inside = (u / spec.radii[0]) ** 2 + (v / spec.radii[1]) ** 2 <= 1.0
    if not inside.any():
        raise PlacementError("ellipse covers no pixel centers")
    return LabelGrid2D(inside.astype(np.int32))


def lesion_increment(shape: tuple[int, int], spec: TumorSpec, mean_bg: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, LabelGrid2D]:
    """Additive lesion image for a given background mean.

    lesion = mask * (sbr - 1) * mean_bg * (1 + h), where h is the lumpy
    field with its in-mask mean removed and clipped at -0.9 to keep the
    lesion positive, then smoothed by the PSF. Depends on the background
    only through mean_bg, so equal means give bit-identical increments.
    """
    if mean_bg <= 0:
        raise InsertionError(f"background mean under the tumor must be > 0, got {mean_bg}")
    mask = make_tumor_mask(shape, spec)
    m = mask.labels.astype(bool)
    texture = gaussian_lumpy(shape, spec.lumpy, rng)
    centered = np.zeros(shape, dtype=np.float64)
    centered[m] = np.clip(texture[m] - texture[m].mean(), -0.9, None)
    lesion = np.where(m, (spec.sbr - 1.0) * mean_bg * (1.0 + centered), 0.0)
    if spec.psf_fwhm > 0:
        lesion = gaussian_filter(lesion, sigma=spec.psf_fwhm * FWHM_TO_SIGMA, mode="constant")
    return lesion, mask


def insert_tumor(background: ScalarGrid2D, spec: TumorSpec,
                 rng: np.random.Generator) -> tuple[ScalarGrid2D, LabelGrid2D]:
    """Insert one simulated tumor into an SUV background image."""
    shape = (background.height, background.width)
    mask = make_tumor_mask(shape, spec)
    mean_bg = float(background.values[mask.labels.astype(bool)].mean())
    lesion, mask = lesion_increment(shape, spec, mean_bg, rng)
    return ScalarGrid2D(background.values + lesion, unit=background.unit), mask


def sample_tumor_spec(roi: LabelGrid2D, rng: np.random.Generator,
                      sbr_range: tuple[float, float] = (2.0, 8.0),
                      radius_range: tuple[float, float] = (2.0, 5.0),
                      lumpy: LumpyParams | None = None,
                      psf_fwhm: float = 2.0) -> TumorSpec:
    """Draw a random lesion spec with its center inside the ROI."""
    rows, cols = np.nonzero(roi.labels)
    if rows.size == 0:
        raise PlacementError("ROI is empty")
    pick = int(rng.integers(0, rows.size))
    r_major = float(rng.uniform(*radius_range))
    r_minor = float(rng.uniform(radius_range[0], r_major))
    return TumorSpec(
        center=(float(rows[pick]), float(cols[pick])),
        radii=(r_major, r_minor),
        rotation=float(rng.uniform(0.0, math.pi)),
        sbr=float(rng.uniform(*sbr_range)),
        lumpy=lumpy or LumpyParams(mean_lump_count=20.0, lump_sigma=1.0, magnitude=0.3),
        psf_fwhm=psf_fwhm,
    )


def threshold_segment(image: ScalarGrid2D, search_roi: LabelGrid2D, fraction: float = 0.41) -> LabelGrid2D:
    """Segment by a fixed fraction of the ROI maximum.

    Returns the pixels inside the ROI whose value is >= fraction * max(ROI).
    """
    if not (0.0 < fraction < 1.0):
        raise InvalidParameterError(f"fraction must be in (0, 1), got {fraction}")
    roi = search_roi.labels.astype(bool)
    if not roi.any():
        raise InvalidParameterError("search ROI is empty")
    peak = image.values[roi].max()
    seg = roi & (image.values >= fraction * peak)
    return LabelGrid2D(seg.astype(np.int32))
