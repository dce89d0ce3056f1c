"""Image statistics: variance maps, scaling, Gaussian blur, Otsu, two-sample KS."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

OTSU_BINS = 256
KS_SERIES_TOL = 1e-12


def min_max_scale(values):
    """(v - min) / (max - min); a constant map scales to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("min_max_scale needs finite values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def variance_map(images):
    """Channel-averaged, per-channel min-max scaled population variance of an image set.

    ``images`` is (N, H, W, C) or a sequence of (H, W, C) arrays.
    """
    if len(images) == 0:
        raise ValueError("variance map of an empty set")
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images have mixed dimensions: {sorted(shapes)}")
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    var = x.var(axis=0)
    # rounding in the mean leaves ~1e-33 residue on constant pixels; min-max would amplify it
    var[np.all(x == x[:1], axis=0)] = 0.0
    scaled = np.stack([min_max_scale(var[..., c]) for c in range(var.shape[-1])], axis=-1)
    return scaled.mean(axis=-1)


def gaussian_kernel_1d(sigma: float, radius: int | None = None):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel_2d(sigma: float, radius: int | None = None):
    k = gaussian_kernel_1d(sigma, radius)
    return np.outer(k, k)


def gaussian_blur(values, sigma: float = 1.0, radius: int | None = None):
    """Separable truncated Gaussian blur with replicate borders (radius ceil(3 sigma))."""
    k = gaussian_kernel_1d(sigma, radius)
    r = len(k) // 2
    v = np.asarray(values, dtype=np.float64)
    p = np.pad(v, r, mode="edge")
    H, W = v.shape
    rows = sum(k[t] * p[t:t + H, :] for t in range(len(k)))
    return sum(k[t] * rows[:, t:t + W] for t in range(len(k)))


def otsu_bin_index(values):
    """Bin b holds (b/256, (b+1)/256]; bin 0 also holds 0. So ``v > b/256`` iff bin >= b."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.ceil(v * OTSU_BINS).astype(np.int64) - 1, 0, OTSU_BINS - 1)


def otsu_binarize(values):
    """Otsu threshold over a 256-bin histogram of [0, 1].

    Returns ``(threshold, mask)`` with ``mask = values > threshold``. The
    threshold is a bin boundary k/256; the between-class variance is compared
    in exact integer arithmetic and ties go to the lowest boundary. When no
    split has positive between-class variance (all mass in one bin) the mask
    is empty.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("otsu of an empty map")
    if v.min() < 0 or v.max() > 1:
        raise ValueError("otsu_binarize expects values in [0, 1]; scale first")
    hist = np.bincount(otsu_bin_index(v).ravel(), minlength=OTSU_BINS)
    # bin centres are (2b + 1) / 512; work with the integer numerators
    c0 = np.cumsum(hist)[:-1].tolist()
    s0 = np.cumsum(hist * (2 * np.arange(OTSU_BINS) + 1))[:-1].tolist()
    n = int(hist.sum())
    s = int((hist * (2 * np.arange(OTSU_BINS) + 1)).sum())
    best_k, best_num, best_den = None, 0, 1
    for k in range(1, OTSU_BINS):
        a, b = c0[k - 1], s0[k - 1]
        if a == 0 or a == n:
            continue
        # between-class variance is proportional to (n*s0 - s*c0)^2 / (c0*c1)
        num = (n * b - s * a) ** 2
        den = a * (n - a)
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    if best_k is None:
        thr = float(v.max())
        return thr, np.zeros(v.shape, dtype=bool)
    thr = best_k / OTSU_BINS
    return thr, v > thr


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n1: int
    n2: int


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the Kolmogorov distribution, Q(lambda) = P(K > lambda)."""
    if lam <= 0:
        return 1.0
    if lam < 1.0:
        # Jacobi-dual form converges fast for small arguments
        total, k = 0.0, 1
        while True:
            term = math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))
            total += term
            if term < KS_SERIES_TOL:
                break
            k += 1
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * total))
    total, k = 0.0, 1
    while True:
        term = math.exp(-2 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < KS_SERIES_TOL:
            break
        k += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_statistic(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / len(a)
    cdf_b = np.searchsorted(b, pooled, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_two_sample(a, b) -> KsResult:
    """Two-sided two-sample KS test with the asymptotic p-value.

    The p-value is Q(sqrt(n1*n2/(n1+n2)) * D).
    """
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("KS test needs two non-empty samples")
    d = ks_statistic(a, b)
    en = n1 * n2 / (n1 + n2)
    return KsResult(d, kolmogorov_sf(math.sqrt(en) * d), n1, n2)
