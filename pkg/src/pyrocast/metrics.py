"""Frame-level forecast metrics.

All functions take 2-D frames with values in [0, 1] (numpy arrays or
anything ``np.asarray`` accepts) and compute in float64.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Sequence

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionMismatch, FrameTooSmall, InsufficientSamples, NoValidPixels

DEFAULT_THRESHOLDS = (0.2, 0.35, 0.5, 0.65, 0.8)
KL_DELTA = 1e-6


class NonPsdCovarianceWarning(RuntimeWarning):
    pass


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"prediction {p.shape} vs target {q.shape}")
    return p, q


def mse(pred, target) -> float:
    p, q = _pair(pred, target)
    return float(np.mean((p - q) ** 2))


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical frames."""
    err = mse(pred, target)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, target, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Single-scale SSIM, Gaussian-weighted, averaged over valid window centres."""
    p, q = _pair(pred, target)
    if p.ndim != 2 or min(p.shape) < win_size:
        raise FrameTooSmall(f"frame {p.shape} is smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)

    def filt(a):
        return convolve2d(a, w, mode="valid")

    mu_p, mu_q = filt(p), filt(q)
    var_p = filt(p * p) - mu_p**2
    var_q = filt(q * q) - mu_q**2
    cov = filt(p * q) - mu_p * mu_q
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_p * mu_q + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_q**2 + c1) * (var_p + var_q + c2))
    return float(s.mean())


def hit_rate(pred, target, epsilon: float = 0.2) -> float:
    """Share of target-positive pixels predicted within ``epsilon`` (strict)."""
    p, q = _pair(pred, target)
    valid = q > 0
    n = int(valid.sum())
    if n == 0:
        raise NoValidPixels("target has no positive pixel")
    return float(np.count_nonzero(np.abs(p[valid] - q[valid]) < epsilon) / n)


def kl_divergence(pred, target, delta: float = KL_DELTA) -> float:
    """Pixelwise Bernoulli KL(target || pred), summed over pixels.

    Both maps are clamped to ``[delta, 1 - delta]`` first.
    """
    p, q = _pair(pred, target)
    p = np.clip(p, delta, 1 - delta)
    q = np.clip(q, delta, 1 - delta)
    return float(np.sum(q * np.log(q / p) + (1 - q) * np.log((1 - q) / (1 - p))))


# ------------------------------------------------------------ Frechet distance

def default_embedding(frame) -> np.ndarray:
    """Handcrafted 26-d frame descriptor.

    4x4 block means (16), burnt fraction, a perimeter estimate (mean absolute
    difference between 4-adjacent pixels) and an 8-bin value histogram.
    """
    f = np.asarray(frame, dtype=np.float64)
    h, w = f.shape
    rows = np.array_split(np.arange(h), 4)
    cols = np.array_split(np.arange(w), 4)
    pooled = [f[np.ix_(r, c)].mean() for r in rows for c in cols]
    perimeter = (np.abs(np.diff(f, axis=0)).sum() + np.abs(np.diff(f, axis=1)).sum()) / (h * w)
    hist = np.histogram(np.clip(f, 0, 1), bins=8, range=(0.0, 1.0))[0] / f.size
    return np.concatenate([pooled, [f.mean(), perimeter], hist])


def _psd_sqrt_trace(a: np.ndarray, b: np.ndarray) -> float:
    """``tr((A B)^{1/2})`` for PSD A, B via the symmetric form sqrt(A) B sqrt(A)."""
    lam, vec = np.linalg.eigh(a)
    root_a = (vec * np.sqrt(np.clip(lam, 0, None))) @ vec.T
    inner = root_a @ b @ root_a
    mu = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(mu, 0, None)).sum())


def _checked_cov(feats: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.cov(feats, rowvar=False))
    lam = np.linalg.eigvalsh(cov)
    if lam.min(initial=0) < -1e-10 * max(1.0, abs(lam).max(initial=0)):
        warnings.warn("covariance is not positive semi-definite; adding 1e-6 I", NonPsdCovarianceWarning)
        cov = cov + 1e-6 * np.eye(len(cov))
    return cov


def frechet_distance_from_features(feat_a, feat_b) -> float:
    a = np.asarray(feat_a, dtype=np.float64)
    b = np.asarray(feat_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a, cov_b = _checked_cov(a), _checked_cov(b)
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * _psd_sqrt_trace(cov_a, cov_b))
    return max(d, 0.0)


def frechet_feature_distance(set_a: Sequence, set_b: Sequence,
                             embed: Callable[[np.ndarray], np.ndarray] = default_embedding) -> float:
    """Frechet distance between Gaussians fitted to embedded frame sets."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise InsufficientSamples("need at least two frames per set")
    return frechet_distance_from_features([embed(f) for f in set_a], [embed(f) for f in set_b])


# ------------------------------------------------------------ threshold sweep

class Mismatch(IntEnum):
    TN = 0
    TP = 1
    FP = 2
    FN = 3


MISMATCH_COLORS = {
    Mismatch.TN: (0, 0, 0),
    Mismatch.TP: (0, 255, 0),
    Mismatch.FP: (255, 0, 0),
    Mismatch.FN: (0, 0, 255),
}


@dataclass
class ThresholdScores:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    f2: float
    mcc: float
    labels: np.ndarray


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion_scores(pred_pos: np.ndarray, true_pos: np.ndarray, threshold: float = float("nan")) -> ThresholdScores:
    tp = int(np.count_nonzero(pred_pos & true_pos))
    fp = int(np.count_nonzero(pred_pos & ~true_pos))
    fn = int(np.count_nonzero(~pred_pos & true_pos))
    tn = int(np.count_nonzero(~pred_pos & ~true_pos))
    precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    f2 = _ratio(5 * precision * recall, 4 * precision + recall)
    den = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = _ratio(float(tp) * tn - float(fp) * fn, den)
    labels = np.full(pred_pos.shape, Mismatch.TN, dtype=np.uint8)
    labels[pred_pos & true_pos] = Mismatch.TP
    labels[pred_pos & ~true_pos] = Mismatch.FP
    labels[~pred_pos & true_pos] = Mismatch.FN
    return ThresholdScores(threshold, tp, fp, fn, tn, precision, recall, f1, f2, mcc, labels)


def threshold_sweep(pred, target, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> list[ThresholdScores]:
    """Binarise prediction and target at each threshold (value > threshold)."""
    p, q = _pair(pred, target)
    return [confusion_scores(p > th, q > th, float(th)) for th in thresholds]


def mismatch_rgb(labels: np.ndarray) -> np.ndarray:
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for label, color in MISMATCH_COLORS.items():
        rgb[labels == label] = color
    return rgb
