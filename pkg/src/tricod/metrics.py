"""Foreground-map metrics: MAE, F-measure, weighted F-measure, S-measure, E-measure.

All kernels take ``pred`` as floats in [0, 1] and ``gt`` as a binary map of the
same shape.  Curves are evaluated on ``k / (n - 1)`` for ``k = 0..n-1``; a
pixel counts as foreground at threshold ``t`` when ``pred >= t``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

EPS = np.spacing(1.0)


@dataclass(frozen=True)
class MetricConfig:
    beta2: float = 0.3
    num_thresholds: int = 256
    sm_alpha: float = 0.5

    @property
    def thresholds(self) -> np.ndarray:
        n = self.num_thresholds
        return np.arange(n, dtype=np.float64) / (n - 1)


@dataclass
class CurveSummary:
    thresholds: np.ndarray
    curve: np.ndarray
    max: float
    mean: float
    adaptive: float


@dataclass
class FMeasureResult(CurveSummary):
    precision: np.ndarray = None
    recall: np.ndarray = None


def prepare(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    if pred.size and (pred.min() < 0 or pred.max() > 1):
        raise ValueError("prediction values must lie in [0, 1]")
    return pred, gt.astype(bool)


def adaptive_threshold(pred) -> float:
    return min(2.0 * float(np.mean(pred)), 1.0)


def mae(pred, gt) -> float:
    pred, gt = prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def positive_counts(pred, gt, thresholds):
    """Per-threshold ``(tp, fp)``: foreground/background pixels with ``pred >= t``."""
    fg = np.sort(pred[gt])
    bg = np.sort(pred[~gt])
    tp = fg.size - np.searchsorted(fg, thresholds, side="left")
    fp = bg.size - np.searchsorted(bg, thresholds, side="left")
    return tp.astype(np.float64), fp.astype(np.float64)


def _fbeta(tp, fp, n_fg, beta2):
    pos = tp + fp
    precision = np.divide(tp, pos, out=np.zeros_like(tp), where=pos > 0)
    recall = tp / n_fg if n_fg > 0 else np.zeros_like(tp)
    den = beta2 * precision + recall
    f = np.divide((1 + beta2) * precision * recall, den, out=np.zeros_like(tp), where=den > 0)
    return precision, recall, f


def f_measure(pred, gt, cfg: MetricConfig = MetricConfig()) -> FMeasureResult:
    pred, gt = prepare(pred, gt)
    n_fg = int(gt.sum())
    if n_fg == 0:
        log.debug("F-measure on an all-background mask is defined as 0")
    thresholds = cfg.thresholds
    tp, fp = positive_counts(pred, gt, thresholds)
    precision, recall, curve = _fbeta(tp, fp, n_fg, cfg.beta2)
    atp, afp = positive_counts(pred, gt, np.array([adaptive_threshold(pred)]))
    _, _, adp = _fbeta(atp, afp, n_fg, cfg.beta2)
    return FMeasureResult(thresholds, curve, float(curve.max()), float(curve.mean()), float(adp[0]),
                          precision=precision, recall=recall)


def _gaussian_kernel(size=7, sigma=5.0):
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def weighted_f_measure(pred, gt, beta2: float = 1.0) -> float:
    """Dependency- and importance-weighted F-measure; 0 for an all-background mask."""
    pred, gt = prepare(pred, gt)
    if not gt.any():
        log.debug("weighted F-measure on an all-background mask is reported as 0")
        return 0.0
    dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
    err = np.abs(pred - gt)
    # background pixels take the error of their nearest foreground pixel
    err_t = err[iy, ix]
    err_a = ndimage.convolve(err_t, _gaussian_kernel(7, 5.0), mode="constant", cval=0.0)
    min_err = np.where(gt & (err_a < err), err_a, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    err_w = min_err * importance
    tp_w = gt.sum() - err_w[gt].sum()
    fp_w = err_w[~gt].sum()
    recall = 1.0 - err_w[gt].mean()
    precision = tp_w / (EPS + tp_w + fp_w)
    return float((1 + beta2) * recall * precision / (EPS + recall + beta2 * precision))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _object_score(x):
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + EPS)


def _ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(gt):
    """1-based (column, row) centroid, rounded half up."""
    h, w = gt.shape
    if not gt.any():
        return _round_half_up(w / 2), _round_half_up(h / 2)
    rows, cols = np.nonzero(gt)
    return _round_half_up(cols.mean() + 1), _round_half_up(rows.mean() + 1)


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    so = y * _object_score(pred[gt]) + (1 - y) * _object_score(1.0 - pred[~gt])
    h, w = gt.shape
    cx, cy = _centroid(gt)
    g = gt.astype(np.float64)
    area = h * w
    quads = [
        (slice(0, cy), slice(0, cx), cx * cy),
        (slice(0, cy), slice(cx, w), (w - cx) * cy),
        (slice(cy, h), slice(0, cx), cx * (h - cy)),
        (slice(cy, h), slice(cx, w), (w - cx) * (h - cy)),
    ]
    sr = 0.0
    for rs, cs, n in quads:
        if n:
            sr += n / area * _ssim(pred[rs, cs], g[rs, cs])
    return float(max(alpha * so + (1 - alpha) * sr, 0.0))


def _enhanced_sum(tp, fp, n_fg, n):
    """Sum of the enhanced-alignment matrix for binarized predictions with the given counts."""
    pos = tp + fp
    if n_fg == 0:
        return n - pos
    if n_fg == n:
        return pos
    mu_p = pos / n
    mu_g = n_fg / n
    fn = n_fg - tp
    tn = n - pos - fn
    total = np.zeros_like(tp)
    for count, dp, dg in ((tp, 1 - mu_p, 1 - mu_g), (fp, 1 - mu_p, -mu_g),
                          (fn, -mu_p, 1 - mu_g), (tn, -mu_p, -mu_g)):
        align = 2 * dp * dg / (dp * dp + dg * dg + EPS)
        total = total + count * (align + 1) ** 2 / 4
    return total


def e_measure(pred, gt, cfg: MetricConfig = MetricConfig()) -> CurveSummary:
    pred, gt = prepare(pred, gt)
    n = gt.size
    n_fg = int(gt.sum())
    thresholds = cfg.thresholds
    tp, fp = positive_counts(pred, gt, thresholds)
    curve = _enhanced_sum(tp, fp, n_fg, n) / n
    atp, afp = positive_counts(pred, gt, np.array([adaptive_threshold(pred)]))
    adp = _enhanced_sum(atp, afp, n_fg, n) / n
    return CurveSummary(thresholds, curve, float(curve.max()), float(curve.mean()), float(adp[0]))
