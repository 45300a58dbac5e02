"""Statistical machinery for the evaluation battery.

Agreement (Lin's concordance, least squares), noise (coefficient of
variation), distribution similarity (Freedman-Diaconis binning and the
Jensen-Shannon distance), hypothesis testing (paired bootstrap on CCC
differences, Wilcoxon signed-rank with an exact small-sample path), and
segmentation overlap metrics.

Population (1/n) moments are used throughout so CCC and CoV share one
convention. Degenerate inputs return NaN rather than raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagekit import InvalidParameterError, ShapeError

UNDEFINED = float("nan")


@dataclass(frozen=True)
class PairedSample:
    """Two equal-length measurement vectors over the same cases."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 1 or x.shape != y.shape:
            raise ShapeError("paired sample needs two equal-length 1-D vectors")
        if x.size < 2:
            raise InvalidParameterError("paired sample needs n >= 2")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise InvalidParameterError("paired sample contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.size


def lin_ccc(pair: PairedSample) -> float:
    """Lin's concordance: 2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2)."""
    x, y = pair.x, pair.y
    mx, my = x.mean(), y.mean()
    sx2 = ((x - mx) ** 2).mean()
    sy2 = ((y - my) ** 2).mean()
    sxy = ((x - mx) * (y - my)).mean()
    denom = sx2 + sy2 + (mx - my) ** 2
    if denom == 0:
        return UNDEFINED
    return float(2.0 * sxy / denom)


def linreg(pair: PairedSample) -> tuple[float, float, float]:
    """Ordinary least squares (slope, intercept, Pearson r)."""
    x, y = pair.x, pair.y
    mx, my = x.mean(), y.mean()
    sx2 = ((x - mx) ** 2).mean()
    if sx2 == 0:
        return UNDEFINED, UNDEFINED, UNDEFINED
    sxy = ((x - mx) * (y - my)).mean()
    slope = sxy / sx2
    intercept = my - slope * mx
    sy2 = ((y - my) ** 2).mean()
    r = sxy / math.sqrt(sx2 * sy2) if sy2 > 0 else UNDEFINED
    return float(slope), float(intercept), float(r)


def cov_metric(values) -> float:
    """Coefficient of variation: population standard deviation over mean."""
    v = np.asarray(values, dtype=np.float64).ravel()
    mean = v.mean()
    if mean == 0:
        return UNDEFINED
    return float(v.std() / mean)


def fd_edges(values) -> np.ndarray:
    """Freedman-Diaconis bin edges: width 2*IQR*n^(-1/3), spanning [min, max].

    Falls back to width range/sqrt(n) when the IQR is zero, and to a
    single unit-wide bin when all values coincide. The last edge is
    always >= max so every value lands in a bin.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise InvalidParameterError("need n >= 2 for binning")
    lo, hi = v.min(), v.max()
    q25, q75 = np.percentile(v, [25, 75])
    width = 2.0 * (q75 - q25) * v.size ** (-1.0 / 3.0)
    if width <= 0:
        width = (hi - lo) / math.sqrt(v.size)
    if width <= 0:
        return np.array([lo, lo + 1.0])
    nbins = max(1, int(math.ceil((hi - lo) / width)))
    return lo + width * np.arange(nbins + 1)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if edges.ndim != 1 or counts.shape != (edges.size - 1,):
            raise ShapeError("need k+1 edges for k counts")
        if not (np.diff(edges) > 0).all():
            raise InvalidParameterError("bin edges must be strictly increasing")
        if (counts < 0).any():
            raise InvalidParameterError("counts must be nonnegative")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts)

    def probabilities(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise InvalidParameterError("empty histogram")
        return self.counts / total


def histogram(values, edges) -> Histogram:
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)
    return Histogram(edges=edges, counts=counts)


def _histogram_prob(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return histogram(values, edges).probabilities()


def js_distance(sample_a, sample_b) -> float:
    """Jensen-Shannon distance between two samples, in [0, 1].

    Both samples are histogrammed over shared Freedman-Diaconis edges
    computed on the pooled data; the value is the square root of the
    base-2 JS divergence.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidParameterError("samples must be nonempty")
    edges = fd_edges(np.concatenate([a, b]))
    p = _histogram_prob(a, edges)
    q = _histogram_prob(b, edges)
    m = 0.5 * (p + q)

    def _kl(u, w):
        nz = u > 0
        return float((u[nz] * np.log2(u[nz] / w[nz])).sum())

    jsd = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    return math.sqrt(max(0.0, min(1.0, jsd)))


def paired_bootstrap_ccc_diff(pair_a: PairedSample, pair_b: PairedSample,
                              n_resamples: int = 1000, seed: int = 0) -> float:
    """Two-sided paired bootstrap p-value for CCC_A - CCC_B.

    Cases are resampled with replacement, preserving within-case pairing;
    each resample uses a seed derived from (seed, resample index) so the
    result does not depend on evaluation order. Resamples where a CCC is
    degenerate are redrawn a bounded number of times.
    """
    if pair_a.n != pair_b.n:
        raise ShapeError("paired samples must share case ids (equal length)")
    if n_resamples < 1:
        raise InvalidParameterError("need at least one resample")
    n = pair_a.n
    deltas = np.empty(n_resamples)
    for b in range(n_resamples):
        rng = np.random.default_rng([seed, b])
        for _ in range(100):
            idx = rng.integers(0, n, size=n)
            ccc_a = lin_ccc(PairedSample(pair_a.x[idx], pair_a.y[idx]))
            ccc_b = lin_ccc(PairedSample(pair_b.x[idx], pair_b.y[idx]))
            if not (math.isnan(ccc_a) or math.isnan(ccc_b)):
                deltas[b] = ccc_a - ccc_b
                break
        else:
            return UNDEFINED
    frac_le = (deltas <= 0).mean()
    frac_ge = (deltas >= 0).mean()
    return float(min(1.0, 2.0 * min(frac_le, frac_ge)))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def _signed_ranks(diffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of |d| (ties shared) and the sign of each d; zeros dropped."""
    d = np.asarray(diffs, dtype=np.float64).ravel()
    d = d[d != 0]
    if d.size == 0:
        return np.empty(0), np.empty(0)
    a = np.abs(d)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(d.size)
    sorted_a = a[order]
    i = 0
    while i < d.size:
        j = i
        while j + 1 < d.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks, np.sign(d)


def _exact_signed_rank_p(ranks: np.ndarray, w_plus: float) -> float:
    """Exact two-sided p over the 2^n equiprobable sign assignments.

    Counting runs over doubled ranks (integers even with midranks) with a
    subset-sum table, so it stays cheap up to n = 20.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] += counts[:counts.size - r].copy()
    n_assign = 2.0 ** len(ranks)
    w2 = 2.0 * w_plus
    sums = np.arange(total + 1)
    p_le = counts[sums <= w2 + 1e-9].sum() / n_assign
    p_ge = counts[sums >= w2 - 1e-9].sum() / n_assign
    return min(1.0, 2.0 * min(p_le, p_ge))


def _approx_signed_rank_p(ranks: np.ndarray, w_plus: float) -> float:
    """Normal approximation with tie and continuity corrections."""
    n = ranks.size
    mean = n * (n + 1) / 4.0
    tie_term = 0.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    for t in tie_counts:
        tie_term += t ** 3 - t
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if var <= 0:
        return UNDEFINED
    dev = w_plus - mean
    cc = 0.5 * math.copysign(1.0, dev) if dev != 0 else 0.0
    z = (dev - cc) / math.sqrt(var)
    p = 2.0 * 0.5 * math.erfc(abs(z) / math.sqrt(2.0))
    return min(1.0, p)


EXACT_LIMIT = 20


def wilcoxon_signed_rank(diffs) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped; tied magnitudes share average ranks.
    The p-value is exact (full sign-assignment enumeration) for n <= 20
    after dropping zeros and a tie/continuity-corrected normal
    approximation beyond. Returns (W, p) where W = min(W+, W-).
    """
    ranks, signs = _signed_ranks(np.asarray(diffs, dtype=np.float64))
    n = ranks.size
    if n == 0:
        return UNDEFINED, UNDEFINED
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_LIMIT:
        p = _exact_signed_rank_p(ranks, w_plus)
    else:
        p = _approx_signed_rank_p(ranks, w_plus)
    return w, p


# ---------------------------------------------------------------------------
# segmentation overlap


def dice(mask_a, mask_b) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|); two empty masks count as 1."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError("mask shapes differ")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / denom)


def rvd(pred_mask, ref_mask) -> float:
    """Relative volume difference (|pred| - |ref|) / |ref|."""
    p = np.asarray(pred_mask).astype(bool)
    r = np.asarray(ref_mask).astype(bool)
    if p.shape != r.shape:
        raise ShapeError("mask shapes differ")
    nref = r.sum()
    if nref == 0:
        return UNDEFINED
    return float((p.sum() - nref) / nref)


def bonferroni_threshold(alpha: float, m: int) -> float:
    """Per-comparison significance level alpha / m."""
    if m < 1:
        raise InvalidParameterError("need m >= 1 comparisons")
    return alpha / m
