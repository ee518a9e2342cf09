"""Reliability masks from comparing observed frames with renders of the learned average texture.

Pipeline per frame: grayscale SSIM map between the observed image and the
render, an Otsu threshold over the SSIM values inside the segmentation, then
removal of silhouette pixels that fall on the zero-padded border.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imageio import write_pgm

log = logging.getLogger(__name__)

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SKIP_THRESHOLD = 0.7
MIN_SSIM = 0.1  # pixels below this never count as agreeing, whatever the Otsu split says


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ GRAY_WEIGHTS if img.ndim == 3 else img


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(observed, rendered, dynamic_range=1.0, window=None):
    """Per-pixel SSIM of the grayscale images; borders use symmetric reflection."""
    a, b = to_gray(observed), to_gray(rendered)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    w = gaussian_window() if window is None else window
    C1 = (0.01 * dynamic_range) ** 2
    C2 = (0.03 * dynamic_range) ** 2

    def filt(x):
        return ndimage.correlate(x, w, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return num / den


@dataclass
class OtsuResult:
    threshold: float
    bin_index: int      # first bin of the upper class
    degenerate: bool    # constant input; the threshold passes everything


def _bins(values, lo, hi, nbins):
    idx = np.floor((values - lo) / (hi - lo) * nbins).astype(np.int64)
    return np.clip(idx, 0, nbins - 1)


def between_class_variance(values, upper):
    """omega_0 omega_1 (mu_0 - mu_1)^2 for the split ``upper`` vs. the rest."""
    n = len(values)
    n1 = int(upper.sum())
    if n1 == 0 or n1 == n:
        return 0.0
    w1 = n1 / n
    return (1 - w1) * w1 * (values[~upper].mean() - values[upper].mean()) ** 2


def otsu(values, nbins=256) -> OtsuResult:
    """Threshold maximising between-class variance over bin boundaries of a histogram.

    Class means use the actual values falling into each bin, so the score of
    each boundary equals the exact between-class variance of that split. Ties
    resolve to the lowest boundary. Every boundary inside a run of empty bins
    gives the same split, so the reported threshold sits halfway between the
    largest lower-class value and the smallest upper-class value.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values to threshold")
    lo, hi = v.min(), v.max()
    if hi == lo:
        log.warning("constant input to Otsu threshold; every value passes")
        return OtsuResult(float(lo), 0, True)
    idx = _bins(v, lo, hi, nbins)
    counts = np.bincount(idx, minlength=nbins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=nbins)
    n, total = counts.sum(), sums.sum()
    # split k: bins < k form the lower class, k = 1..nbins-1
    c0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    c1 = n - c0
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (c0 / n) * (c1 / n) * (s0 / c0 - (total - s0) / c1) ** 2
    score = np.where((c0 > 0) & (c1 > 0), score, -1.0)
    k = int(np.argmax(score)) + 1
    upper = idx >= k
    return OtsuResult(float(0.5 * (v[~upper].max() + v[upper].min())), k, False)


def otsu_threshold(values, nbins=256) -> float:
    return otsu(values, nbins).threshold


def otsu_split(values, nbins=256):
    """Boolean "upper class" membership of ``values`` under their Otsu threshold."""
    v = np.asarray(values, dtype=np.float64)
    res = otsu(v, nbins)
    if res.degenerate:
        return np.ones(v.shape, dtype=bool), res
    return _bins(v, v.min(), v.max(), nbins) >= res.bin_index, res


def padding_band(shape, width):
    """Boolean image marking a border band ``width`` pixels wide."""
    h, w = shape[:2]
    P = np.zeros((h, w), dtype=bool)
    if width > 0:
        P[:width] = P[-width:] = True
        P[:, :width] = P[:, -width:] = True
    return P


def iou(a, b):
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


@dataclass
class FrameMask:
    ssim_mask: np.ndarray
    final_mask: np.ndarray
    skip: bool
    deviation: float
    threshold: float = float("nan")
    degenerate: bool = False


def build_mask(observed, rendered, seg, silhouette, padding=None, skip_threshold=SKIP_THRESHOLD,
               min_ssim=MIN_SSIM) -> FrameMask:
    """Keep segmented pixels whose local structure agrees with the render.

    M_SSIM holds the seg pixels in the upper Otsu class of SSIM (threshold
    computed from seg pixels only) whose SSIM also reaches ``min_ssim``; the final mask drops pixels lying on both
    the body silhouette and the padded border. Frames whose final mask
    deviates too far from the segmentation (1 - IoU) are flagged for skipping.
    """
    seg = np.asarray(seg, dtype=bool)
    sil = np.asarray(silhouette, dtype=bool)
    pad = np.zeros_like(seg) if padding is None else np.asarray(padding, dtype=bool)
    if not (seg.shape == sil.shape == pad.shape == to_gray(observed).shape):
        raise ValueError("mask inputs must share one resolution")
    s = ssim_map(observed, rendered)
    if not seg.any():
        log.info("empty segmentation; frame skipped")
        empty = np.zeros_like(seg)
        return FrameMask(empty, empty, True, 1.0)
    upper, res = otsu_split(s[seg])
    m_ssim = np.zeros_like(seg)
    m_ssim[seg] = upper & (s[seg] >= min_ssim)
    final = m_ssim & ~(sil & pad)
    deviation = 1.0 - iou(final, seg)
    return FrameMask(m_ssim, final, deviation > skip_threshold, deviation, res.threshold, res.degenerate)


def save_masks(directory, frame, fm: FrameMask):
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / f"ssim_mask_{frame:04d}.pgm", fm.ssim_mask)
    write_pgm(d / f"mask_{frame:04d}.pgm", fm.final_mask)
