"""First-order and grey-level co-occurrence texture features.

The feature set is fixed: ten first-order statistics and seventeen GLCM
features computed over a masked region, with the GLCM accumulated
symmetrically along the four principal directions and feature values
averaged across directions. Formulas follow the common standardized
definitions; discretization is a fixed number of equal-width bins over
the masked min-max range. Degenerate regions (constant intensity, zero
marginal variance) yield NaN for the affected features instead of
raising, so population pipelines keep running.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagekit import InvalidParameterError, ShapeError

UNDEFINED = float("nan")

FIRST_ORDER_NAMES = (
    "p10", "p90", "entropy", "iqr", "kurtosis",
    "mad", "median", "range", "skewness", "uniformity",
)

GLCM_NAMES = (
    "autocorrelation", "contrast", "correlation",
    "difference_average", "difference_entropy", "difference_variance",
    "inverse_difference", "inverse_difference_moment",
    "imc1", "imc2", "inverse_variance",
    "joint_average", "joint_energy", "joint_entropy",
    "mcc", "sum_average", "sum_entropy",
)

# direction offsets (drow, dcol) for 0, 45, 90, 135 degrees
DIRECTIONS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))


class InsufficientDataError(InvalidParameterError):
    pass


class EmptyGlcmError(InvalidParameterError):
    pass


@dataclass(frozen=True)
class GlcmConfig:
    bin_count: int = 32
    distance: int = 1
    symmetric: bool = True

    def __post_init__(self):
        if self.bin_count < 2:
            raise InvalidParameterError("bin_count must be >= 2")
        if self.distance < 1:
            raise InvalidParameterError("distance must be >= 1")


FeatureVector = list  # ordered (name, value) pairs


def _discretize(values: np.ndarray, bin_count: int) -> np.ndarray:
    """Equal-width levels 0..bin_count-1 over [min, max]; constant -> all 0."""
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    levels = np.floor((values - lo) / (hi - lo) * bin_count).astype(np.int64)
    return np.clip(levels, 0, bin_count - 1)


def first_order(values, bin_count: int = 32) -> FeatureVector:
    """The ten first-order features of a masked pixel multiset.

    Percentiles use linear interpolation; skewness and kurtosis are the
    population moment ratios (kurtosis is not excess-corrected); entropy
    and uniformity are computed on an equal-width discretization.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise InsufficientDataError(f"need at least 2 values, got {v.size}")
    p10, p25, p50, p75, p90 = np.percentile(v, [10, 25, 50, 75, 90])
    mean = v.mean()
    sd = v.std()
    m3 = ((v - mean) ** 3).mean()
    m4 = ((v - mean) ** 4).mean()
    skew = m3 / sd ** 3 if sd > 0 else UNDEFINED
    kurt = m4 / sd ** 4 if sd > 0 else UNDEFINED
    levels = _discretize(v, bin_count)
    p = np.bincount(levels, minlength=bin_count).astype(np.float64) / v.size
    nz = p[p > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    return [
        ("p10", float(p10)),
        ("p90", float(p90)),
        ("entropy", entropy),
        ("iqr", float(p75 - p25)),
        ("kurtosis", float(kurt)),
        ("mad", float(np.abs(v - mean).mean())),
        ("median", float(p50)),
        ("range", float(v.max() - v.min())),
        ("skewness", float(skew)),
        ("uniformity", float((p ** 2).sum())),
    ]


def glcm_matrix(image, mask, direction: tuple[int, int], config: GlcmConfig = GlcmConfig()) -> np.ndarray:
    """Co-occurrence probability matrix for one direction.

    The image is discretized over the masked min-max range; a pixel pair
    contributes only if both ends lie in the mask. Symmetric accumulation
    counts each pair in both orders.
    """
    img = np.asarray(image, dtype=np.float64)
    msk = np.asarray(mask).astype(bool)
    if img.shape != msk.shape:
        raise ShapeError("image and mask shapes differ")
    if not msk.any():
        raise EmptyGlcmError("mask is empty")
    levels = np.full(img.shape, -1, dtype=np.int64)
    levels[msk] = _discretize(img[msk], config.bin_count)
    dr, dc = (direction[0] * config.distance, direction[1] * config.distance)
    h, w = img.shape
    counts = np.zeros((config.bin_count, config.bin_count), dtype=np.float64)
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    a = levels[r0:r1, c0:c1]
    b = levels[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    valid = (a >= 0) & (b >= 0)
    if not valid.any():
        raise EmptyGlcmError(f"no valid pixel pairs along direction {direction}")
    np.add.at(counts, (a[valid], b[valid]), 1.0)
    if config.symmetric:
        counts = counts + counts.T
    return counts / counts.sum()


def _marginal_stats(p: np.ndarray):
    n = p.shape[0]
    i = np.arange(1, n + 1, dtype=np.float64)
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mu_x = (i * px).sum()
    mu_y = (i * py).sum()
    var_x = ((i - mu_x) ** 2 * px).sum()
    var_y = ((i - mu_y) ** 2 * py).sum()
    return i, px, py, mu_x, mu_y, var_x, var_y


def _entropy2(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def glcm_features(p: np.ndarray) -> FeatureVector:
    """The seventeen co-occurrence features of one normalized GLCM.

    Grey levels are valued 1..N. Correlation and the informational
    measures are NaN when the marginals are degenerate; MCC is the square
    root of the second-largest eigenvalue magnitude of the transition
    matrix Q built from the co-occurrence probabilities.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ShapeError("GLCM must be square")
    if not math.isclose(p.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
        raise InvalidParameterError("GLCM must be normalized to sum 1")
    n = p.shape[0]
    i, px, py, mu_x, mu_y, var_x, var_y = _marginal_stats(p)
    ii = i[:, None]
    jj = i[None, :]
    diff = np.abs(ii - jj)

    autocorr = float((ii * jj * p).sum())
    contrast = float(((ii - jj) ** 2 * p).sum())
    if var_x > 0 and var_y > 0:
        correlation = float((autocorr - mu_x * mu_y) / math.sqrt(var_x * var_y))
    else:
        correlation = UNDEFINED

    # diagonal (difference) and cross-diagonal (sum) distributions
    k_diff = np.arange(n, dtype=np.float64)
    p_diff = np.zeros(n)
    k_sum = np.arange(2, 2 * n + 1, dtype=np.float64)
    p_sum = np.zeros(2 * n - 1)
    for a in range(n):
        for b in range(n):
            p_diff[abs(a - b)] += p[a, b]
            p_sum[a + b] += p[a, b]
    diff_avg = float((k_diff * p_diff).sum())
    diff_entropy = _entropy2(p_diff)
    diff_var = float(((k_diff - diff_avg) ** 2 * p_diff).sum())
    sum_avg = float((k_sum * p_sum).sum())
    sum_entropy = _entropy2(p_sum)

    inv_diff = float((p / (1.0 + diff)).sum())
    inv_diff_moment = float((p / (1.0 + diff ** 2)).sum())
    off = ~np.eye(n, dtype=bool)
    inv_var = float((p[off] / diff[off] ** 2).sum()) if n > 1 else 0.0

    hxy = _entropy2(p)
    hx = _entropy2(px)
    hy = _entropy2(py)
    pxy = px[:, None] * py[None, :]
    with np.errstate(divide="ignore"):
        log_pxy = np.where(pxy > 0, np.log2(np.where(pxy > 0, pxy, 1.0)), 0.0)
    hxy1 = float(-(p * log_pxy).sum())
    hxy2 = float(-(pxy * log_pxy).sum())
    if max(hx, hy) > 0:
        imc1 = (hxy - hxy1) / max(hx, hy)
    else:
        imc1 = UNDEFINED
    imc2 = math.sqrt(max(0.0, 1.0 - math.exp(-2.0 * (hxy2 - hxy))))

    joint_avg = float((ii * p).sum())
    joint_energy = float((p ** 2).sum())

    present = px > 0
    if present.sum() >= 2:
        psub = p[np.ix_(present, present)]
        px_sub = px[present]
        py_sub = py[present]
        q = (psub[:, None, :] * psub[None, :, :] /
             (px_sub[:, None, None] * py_sub[None, None, :])).sum(axis=2)
        eig = np.sort(np.abs(np.linalg.eigvals(q)))[::-1]
        mcc = float(math.sqrt(max(0.0, eig[1]))) if eig.size >= 2 else UNDEFINED
    else:
        mcc = 1.0  # single occupied level: the chain is trivially deterministic

    return [
        ("autocorrelation", autocorr),
        ("contrast", contrast),
        ("correlation", correlation),
        ("difference_average", diff_avg),
        ("difference_entropy", diff_entropy),
        ("difference_variance", diff_var),
        ("inverse_difference", inv_diff),
        ("inverse_difference_moment", inv_diff_moment),
        ("imc1", imc1),
        ("imc2", imc2),
        ("inverse_variance", inv_var),
        ("joint_average", joint_avg),
        ("joint_energy", joint_energy),
        ("joint_entropy", hxy),
        ("mcc", mcc),
        ("sum_average", sum_avg),
        ("sum_entropy", sum_entropy),
    ]


def glcm_averaged(image, mask, config: GlcmConfig = GlcmConfig()) -> FeatureVector:
    """Per-direction GLCM features averaged over the four directions.

    NaN propagates: if a feature is undefined along any direction, the
    average is undefined too.
    """
    per_direction = [glcm_features(glcm_matrix(image, mask, d, config)) for d in DIRECTIONS]
    out = []
    for idx, name in enumerate(GLCM_NAMES):
        vals = [fv[idx][1] for fv in per_direction]
        out.append((name, float(np.mean(vals))))
    return out


def all_features(image, mask, config: GlcmConfig = GlcmConfig()) -> FeatureVector:
    """First-order + direction-averaged GLCM features of one masked region."""
    img = np.asarray(image, dtype=np.float64)
    msk = np.asarray(mask).astype(bool)
    if img.shape != msk.shape:
        raise ShapeError("image and mask shapes differ")
    return first_order(img[msk], config.bin_count) + glcm_averaged(img, msk, config)
