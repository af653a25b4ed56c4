"""Pixel-level PR curves, F1 and per-slide metrics on a 256-level probability grid.

Probabilities are quantized to ``floor(p * 255)`` so slides can be streamed
into a fixed ``(256, 2)`` histogram and merged by addition. PR AUC uses the
average-precision step sum, not trapezoids.
"""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

N_BINS = 256
SENTINEL = 1.0 + 1e-9


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class PrCurve:
    thresholds: np.ndarray  # descending, 257 entries
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    auc: float


@dataclass
class SlideMetrics:
    slide_id: str
    sensitivity: Optional[float]
    specificity: Optional[float]
    f1: Optional[float]
    threshold: float


def quantize(probs) -> np.ndarray:
    """Bin index ``floor(p * 255)`` as uint8; p is clipped to [0, 1]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, 1.0)
    return np.floor(p * 255.0).astype(np.uint8)


def accumulate_histogram(probs, labels, domain=None) -> np.ndarray:
    """Counts per (bin, label) as an int64 array of shape (256, 2).

    ``probs`` may already be quantized (uint8 bins) or float in [0, 1].
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or (domain is not None and np.shape(domain) != labels.shape):
        raise ValueError(f"dimension mismatch: {probs.shape} vs {labels.shape}")
    q = probs if probs.dtype == np.uint8 else quantize(probs)
    y = labels.astype(bool)
    if domain is not None:
        keep = np.asarray(domain).astype(bool)
        q, y = q[keep], y[keep]
    hist = np.zeros((N_BINS, 2), dtype=np.int64)
    hist[:, 0] = np.bincount(q[~y].ravel(), minlength=N_BINS)
    hist[:, 1] = np.bincount(q[y].ravel(), minlength=N_BINS)
    return hist


def thresholds() -> np.ndarray:
    return np.concatenate([[SENTINEL], np.arange(255, -1, -1) / 255.0])


def pr_curve_from_histogram(hist) -> PrCurve:
    hist = np.asarray(hist, dtype=np.int64)
    pos_total = int(hist[:, 1].sum())
    if pos_total == 0:
        raise ValueError("no positive pixels: PR curve undefined")
    # cumulative counts of pixels predicted positive, bins 255 down to 0
    tp = np.concatenate([[0], np.cumsum(hist[::-1, 1])])
    fp = np.concatenate([[0], np.cumsum(hist[::-1, 0])])
    denom = tp + fp
    precision = np.where(denom > 0, tp / np.maximum(denom, 1), 1.0)
    recall = tp / pos_total
    pr = precision + recall
    f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    auc = float(np.sum(np.diff(recall) * precision[1:]))
    return PrCurve(thresholds(), precision, recall, f1, auc)


def max_f1(curve: PrCurve):
    """Best F1 and its threshold; ties go to the higher threshold."""
    i = int(np.argmax(curve.f1))  # first maximum = highest threshold
    return float(curve.f1[i]), float(curve.thresholds[i])


def confusion(probs, labels, threshold, domain=None) -> ConfusionCounts:
    """Counts with ``p >= threshold`` on the quantized grid (bin / 255)."""
    q = probs if np.asarray(probs).dtype == np.uint8 else quantize(probs)
    pred = q / 255.0 >= threshold
    y = np.asarray(labels).astype(bool)
    if domain is not None:
        keep = np.asarray(domain).astype(bool)
        pred, y = pred[keep], y[keep]
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def slide_metrics(probs, labels, threshold, slide_id="", domain=None) -> SlideMetrics:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    c = confusion(probs, labels, threshold, domain)
    has_pos = c.tp + c.fn > 0
    sens = c.tp / (c.tp + c.fn) if has_pos else None
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp > 0 else None
    f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if has_pos else None
    return SlideMetrics(slide_id, sens, spec, f1, threshold)


def boxplot_stats(values: Sequence[float]):
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("boxplot of an empty list")
    if len(vals) == 1:
        v = vals[0]
        return v, v, v, v, v
    q1, med, q3 = statistics.quantiles(vals, n=4, method="inclusive")
    return min(vals), q1, med, q3, max(vals)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(out_dir, curve: PrCurve, per_slide: Iterable[SlideMetrics], notes: dict | None = None) -> dict:
    """Write pr_curve.csv, summary.json, per_slide.csv and boxplot.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_slide = list(per_slide)
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f1"])
        for row in zip(curve.thresholds, curve.precision, curve.recall, curve.f1):
            w.writerow([repr(float(v)) for v in row])
    best, thr = max_f1(curve)
    summary = {"auc": curve.auc, "auc_rule": "average-precision step sum", "max_f1": best,
               "max_f1_threshold": thr, **(notes or {})}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "per_slide.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "sensitivity", "specificity", "f1", "sensitivity_defined",
                    "specificity_defined", "f1_defined", "threshold"])
        for m in per_slide:
            w.writerow([m.slide_id, _fmt(m.sensitivity), _fmt(m.specificity), _fmt(m.f1),
                        int(m.sensitivity is not None), int(m.specificity is not None), int(m.f1 is not None),
                        repr(float(m.threshold))])
    with open(out / "boxplot.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "n", "min", "q1", "median", "q3", "max"])
        for name in ("sensitivity", "specificity", "f1"):
            vals = [getattr(m, name) for m in per_slide if getattr(m, name) is not None]
            if vals:
                w.writerow([name, len(vals), *(repr(v) for v in boxplot_stats(vals))])
            else:
                w.writerow([name, 0, "", "", "", "", ""])
    return summary


def evaluate(pairs, threshold=0.5) -> tuple:
    """``pairs`` yields ``(slide_id, probs, labels, domain)``; returns curve and per-slide metrics."""
    hist = np.zeros((N_BINS, 2), dtype=np.int64)
    per_slide: List[SlideMetrics] = []
    for sid, probs, labels, domain in pairs:
        q = probs if np.asarray(probs).dtype == np.uint8 else quantize(probs)
        hist += accumulate_histogram(q, labels, domain)
        per_slide.append(slide_metrics(q, labels, threshold, sid, domain))
    return pr_curve_from_histogram(hist), per_slide


def pr_auc(probs_list, labels_list) -> float:
    hist = sum(accumulate_histogram(p, y) for p, y in zip(probs_list, labels_list))
    return pr_curve_from_histogram(hist).auc
