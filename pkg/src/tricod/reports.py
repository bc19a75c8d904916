"""Folder-level evaluation: per-image metrics, dataset means, curve and histogram files."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import metrics
from .data import MASK_DIR, MASK_THRESHOLD, DatasetError, read_mask
from .metrics import MetricConfig

log = logging.getLogger(__name__)

HISTOGRAM_BAND = (20, 245)


@dataclass
class ImageMetrics:
    stem: str
    mae: float
    sm: float
    wfm: float
    fm_curve: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fm_adaptive: float
    em_curve: np.ndarray
    em_adaptive: float
    histogram: np.ndarray
    degenerate: bool


@dataclass
class MetricReport:
    num_images: int
    sm: float
    wfm: float
    mae: float
    fm: dict
    em: dict
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fm_curve: np.ndarray
    em_curve: np.ndarray
    histogram: np.ndarray
    histogram_bins: np.ndarray
    degenerate: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "num_images": self.num_images,
            "sm": self.sm,
            "wfm": self.wfm,
            "mae": self.mae,
            "fm": self.fm,
            "em": self.em,
            "degenerate": self.degenerate,
        }


def _mask_folder(gt_dir: Path) -> Path:
    return gt_dir / MASK_DIR if (gt_dir / MASK_DIR).is_dir() else gt_dir


def _pngs(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise DatasetError(f"missing directory: {folder}")
    return {p.stem: p for p in sorted(folder.glob("*.png"))}


def match_folders(pred_dir, gt_dir) -> list[tuple[str, Path, Path]]:
    preds = _pngs(Path(pred_dir))
    gts = _pngs(_mask_folder(Path(gt_dir)))
    only_pred = sorted(preds.keys() - gts.keys())
    only_gt = sorted(gts.keys() - preds.keys())
    if only_pred or only_gt:
        raise DatasetError(f"unmatched stems: predictions only {only_pred}, ground truth only {only_gt}")
    if not preds:
        raise DatasetError(f"no predictions found in {pred_dir}")
    return [(s, preds[s], gts[s]) for s in sorted(preds)]


def evaluate_arrays(stem, pred_u8, gt_u8, cfg: MetricConfig = MetricConfig()) -> ImageMetrics:
    """Metrics for one 8-bit prediction against one 8-bit mask (resized to the mask first)."""
    histogram = np.bincount(pred_u8.ravel(), minlength=256).astype(np.int64)
    pred = pred_u8.astype(np.float32) / 255.0
    if pred.shape != gt_u8.shape:
        pred = cv2.resize(pred, (gt_u8.shape[1], gt_u8.shape[0]), interpolation=cv2.INTER_LINEAR)
    pred = np.clip(pred.astype(np.float64), 0.0, 1.0)
    gt = gt_u8 > MASK_THRESHOLD
    degenerate = not gt.any() or gt.all()
    if degenerate:
        log.info("degenerate ground truth (uniform mask) for %s", stem)
    fm = metrics.f_measure(pred, gt, cfg)
    em = metrics.e_measure(pred, gt, cfg)
    return ImageMetrics(
        stem=stem,
        mae=metrics.mae(pred, gt),
        sm=metrics.s_measure(pred, gt, cfg.sm_alpha),
        wfm=metrics.weighted_f_measure(pred, gt),
        fm_curve=fm.curve,
        precision=fm.precision,
        recall=fm.recall,
        fm_adaptive=fm.adaptive,
        em_curve=em.curve,
        em_adaptive=em.adaptive,
        histogram=histogram,
        degenerate=degenerate,
    )


def _evaluate_files(args):
    stem, pred_path, gt_path, cfg = args
    return evaluate_arrays(stem, read_mask(pred_path), read_mask(gt_path), cfg)


def _fmean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def _curve_mean(curves) -> np.ndarray:
    stacked = np.stack(curves)
    return np.array([math.fsum(col) for col in stacked.T]) / len(curves)


def aggregate(items: list[ImageMetrics], cfg: MetricConfig = MetricConfig(), histogram_band=False) -> MetricReport:
    """Dataset means; ``math.fsum`` keeps the result independent of image order."""
    items = sorted(items, key=lambda m: m.stem)
    fm_curve = _curve_mean([m.fm_curve for m in items])
    em_curve = _curve_mean([m.em_curve for m in items])
    histogram = np.sum(np.stack([m.histogram for m in items]), axis=0)
    bins = np.arange(256)
    if histogram_band:
        lo, hi = HISTOGRAM_BAND
        bins = bins[lo:hi + 1]
        histogram = histogram[lo:hi + 1]
    return MetricReport(
        num_images=len(items),
        sm=_fmean(m.sm for m in items),
        wfm=_fmean(m.wfm for m in items),
        mae=_fmean(m.mae for m in items),
        fm={"max": float(fm_curve.max()), "mean": float(fm_curve.mean()),
            "adaptive": _fmean(m.fm_adaptive for m in items)},
        em={"max": float(em_curve.max()), "mean": float(em_curve.mean()),
            "adaptive": _fmean(m.em_adaptive for m in items)},
        thresholds=cfg.thresholds,
        precision=_curve_mean([m.precision for m in items]),
        recall=_curve_mean([m.recall for m in items]),
        fm_curve=fm_curve,
        em_curve=em_curve,
        histogram=histogram,
        histogram_bins=bins,
        degenerate=[m.stem for m in items if m.degenerate],
    )


def write_report(report: MetricReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2))
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "fbeta"])
        for row in zip(report.thresholds, report.precision, report.recall, report.fm_curve):
            w.writerow([repr(float(v)) for v in row])
    with open(out / "em_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "em"])
        for t, e in zip(report.thresholds, report.em_curve):
            w.writerow([repr(float(t)), repr(float(e))])
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "count"])
        for b, c in zip(report.histogram_bins, report.histogram):
            w.writerow([int(b), int(c)])


def emit_reports(pred_dir, gt_dir, cfg: MetricConfig = MetricConfig(), out_dir=None,
                 histogram_band=False, workers=1) -> MetricReport:
    jobs = [(stem, p, g, cfg) for stem, p, g in match_folders(pred_dir, gt_dir)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            items = list(pool.map(_evaluate_files, jobs))
    else:
        items = [_evaluate_files(job) for job in jobs]
    report = aggregate(items, cfg, histogram_band)
    if out_dir is not None:
        write_report(report, out_dir)
    return report
