"""Tracking metrics: success AUC, precision curve, long-term Pr/Re/F."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 101)
PIXEL_THRESHOLDS = np.arange(0, 51)
N_CONF_THRESHOLDS = 100


def iou(a, b) -> np.ndarray:
    """IoU of (cx, cy, w, h) boxes along the last axis."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ax1, ax2 = a[..., 0] - a[..., 2] / 2, a[..., 0] + a[..., 2] / 2
    ay1, ay2 = a[..., 1] - a[..., 3] / 2, a[..., 1] + a[..., 3] / 2
    bx1, bx2 = b[..., 0] - b[..., 2] / 2, b[..., 0] + b[..., 2] / 2
    by1, by2 = b[..., 1] - b[..., 3] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _visible(visible, n) -> np.ndarray:
    return np.ones(n, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)


def success_curve(pred, gt, visible=None) -> np.ndarray:
    """Share of visible frames with IoU strictly above each threshold in 0, 0.01, ..., 1."""
    ious = iou(pred, gt)
    vis = _visible(visible, len(ious))
    n = int(vis.sum())
    if n == 0:
        raise ValueError("no visible frames")
    counts = (ious[vis][None, :] > IOU_THRESHOLDS[:, None]).sum(axis=1)
    return counts / n


def success_auc(pred, gt, visible=None) -> float:
    ious = iou(pred, gt)
    vis = _visible(visible, len(ious))
    n = int(vis.sum())
    if n == 0:
        raise ValueError("no visible frames")
    total = int((ious[vis][None, :] > IOU_THRESHOLDS[:, None]).sum())
    return total / (n * len(IOU_THRESHOLDS))


def centre_distance(pred, gt, image_px: float) -> np.ndarray:
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    dx = (p[..., 0] - g[..., 0]) * image_px
    dy = (p[..., 1] - g[..., 1]) * image_px
    return np.sqrt(dx * dx + dy * dy)


def precision_curve(pred, gt, visible=None, image_px: float = 128.0,
                    thresholds=PIXEL_THRESHOLDS) -> tuple[np.ndarray, float]:
    """Share of visible frames whose centre error is within each pixel threshold."""
    d = centre_distance(pred, gt, image_px)
    vis = _visible(visible, len(d))
    n = int(vis.sum())
    if n == 0:
        raise ValueError("no visible frames")
    th = np.asarray(thresholds, dtype=np.float64)
    curve = (d[vis][None, :] <= th[:, None]).sum(axis=1) / n
    p20 = int((d[vis] <= 20.0).sum()) / n
    return curve, p20


def f_score(pr: float, re: float) -> float:
    return 2.0 * pr * re / (pr + re) if pr + re > 0 else 0.0


def longterm_f(pred, confidences, gt, visible=None, n_thresholds: int = N_CONF_THRESHOLDS
               ) -> tuple[float, float, float]:
    """Best (Pr, Re, F) over a grid of confidence thresholds.

    Pr(tau) averages IoU over frames reported with confidence >= tau; Re(tau)
    averages over visible frames, counting unreported frames as IoU 0.
    Ties keep the lowest threshold.
    """
    ious = iou(pred, gt)
    conf = np.asarray(confidences, dtype=np.float64)
    vis = _visible(visible, len(ious))
    ious = np.where(vis, ious, 0.0)
    n_vis = int(vis.sum())
    best = (0.0, 0.0, 0.0)
    for tau in np.linspace(0.0, 1.0, n_thresholds):
        rep = conf >= tau
        k = int(rep.sum())
        if k == 0:
            continue
        hit = math.fsum(ious[rep].tolist())
        pr = hit / k
        re = math.fsum(ious[rep & vis].tolist()) / n_vis if n_vis else 0.0
        f = f_score(pr, re)
        if f > best[2]:
            best = (pr, re, f)
    return best


@dataclass
class TrackMetrics:
    precision_at: dict = field(default_factory=dict)
    precision_20: float = 0.0
    success_auc: float = 0.0
    pr: float = 0.0
    re: float = 0.0
    f_score: float = 0.0
    n_frames: int = 0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["precision_at"] = {str(k): v for k, v in self.precision_at.items()}
        return d


def compute_metrics(pred, confidences, gt, visible=None, image_px: float = 128.0) -> TrackMetrics:
    curve, p20 = precision_curve(pred, gt, visible, image_px)
    pr, re, f = longterm_f(pred, confidences, gt, visible)
    return TrackMetrics(
        precision_at={int(t): float(v) for t, v in zip(PIXEL_THRESHOLDS, curve)},
        precision_20=float(p20),
        success_auc=success_auc(pred, gt, visible),
        pr=pr, re=re, f_score=f,
        n_frames=len(np.asarray(gt)),
    )
