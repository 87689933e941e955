"""Tracking supervision, self-distillation and their combination."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .config import LossWeights
from .model import HeadOutput
from .tensor import ShapeError, Tensor

PROB_CLAMP = 1e-4


def giou_np(a, b) -> np.ndarray:
    """Generalized IoU of (cx, cy, w, h) boxes, broadcasting over leading axes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    enclose = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * (np.maximum(ay2, by2) - np.minimum(ay1, by1))
    return inter / union - (enclose - union) / enclose


def _corners(b):
    return (b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
            b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2)


def giou(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU between predicted [B,4] boxes and constant targets."""
    g = Tensor(np.asarray(gt, dtype=pred.dtype))
    cx, cy, w, h = (pred[:, i] for i in range(4))
    half_w, half_h = T.scale(w, 0.5), T.scale(h, 0.5)
    px1, px2 = cx - half_w, cx + half_w
    py1, py2 = cy - half_h, cy + half_h
    gx1, gy1, gx2, gy2 = (Tensor(v) for v in _corners(g.data))
    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = w * h + Tensor(g.data[:, 2] * g.data[:, 3]) - inter
    enclose = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (T.maximum(py2, gy2) - T.minimum(py1, gy1))
    return inter / union - (enclose - union) / enclose


def gt_cells(gt: np.ndarray, S: int) -> tuple[np.ndarray, np.ndarray]:
    col = np.clip(np.floor(gt[:, 0] * S).astype(int), 0, S - 1)
    row = np.clip(np.floor(gt[:, 1] * S).astype(int), 0, S - 1)
    return row, col


def gaussian_target(gt: np.ndarray, S: int, sigma: float) -> np.ndarray:
    """[B,S,S] heatmaps peaking at exactly 1 on each ground-truth cell."""
    row, col = gt_cells(gt, S)
    ii, jj = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    d2 = (ii[None] - row[:, None, None]) ** 2 + (jj[None] - col[:, None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def focal_loss(score: Tensor, target: np.ndarray, pos_gamma: float, neg_gamma: float) -> Tensor:
    """Center-heatmap focal penalty, normalised by the number of peaks."""
    p = T.clip(T.sigmoid(score), PROB_CLAMP, 1 - PROB_CLAMP)
    pos = (target == 1.0).astype(score.dtype)
    neg_w = ((1.0 - target) ** neg_gamma * (1.0 - pos)).astype(score.dtype)
    one_minus = 1.0 - p
    pos_term = T.log(p) * _power(one_minus, pos_gamma) * Tensor(pos)
    neg_term = T.log(one_minus) * _power(p, pos_gamma) * Tensor(neg_w)
    n_pos = max(float(pos.sum()), 1.0)
    return T.scale(pos_term.sum() + neg_term.sum(), -1.0 / n_pos)


def _power(x: Tensor, k: float) -> Tensor:
    if k == 2.0:
        return x * x
    return T.exp(T.scale(T.log(x), k))


def predicted_boxes(out: HeadOutput, row: np.ndarray, col: np.ndarray) -> Tensor:
    S = out.score.shape[-1]
    b = np.arange(row.shape[0])
    off = out.offset[b, :, row, col]
    size = out.size[b, :, row, col]
    cells = Tensor(np.stack([col, row], axis=1).astype(off.dtype))
    centre = T.scale(off + cells, 1.0 / S)
    return T.concat([centre, size], axis=1)


def tracking_loss(out: HeadOutput, gt_box, w: LossWeights) -> tuple[Tensor, dict]:
    """Focal heatmap loss + lambda_iou * (1 - GIoU) + lambda_l1 * L1, batch-averaged.

    ``gt_box`` is [B,4] (cx, cy, w, h) in search-crop units.
    """
    gt = np.atleast_2d(np.asarray(gt_box, dtype=np.float64))
    if np.any(gt[:, 2:] <= 0):
        raise ValueError("ground-truth box has zero width or height")
    if np.any(gt[:, :2] < 0) or np.any(gt[:, :2] > 1):
        raise ValueError("ground-truth centre outside the unit square")
    S = out.score.shape[-1]
    B = gt.shape[0]
    target = gaussian_target(gt, S, w.heatmap_sigma)
    l_cls = T.scale(focal_loss(out.score, target, w.focal_pos, w.focal_neg), 1.0 / B)
    row, col = gt_cells(gt, S)
    pred = predicted_boxes(out, row, col)
    l_iou = T.mean(1.0 - giou(pred, gt))
    l_1 = T.mean(T.absolute(pred - Tensor(gt.astype(pred.dtype))))
    total = l_cls + T.scale(l_iou, w.lambda_iou) + T.scale(l_1, w.lambda_l1)
    parts = {"cls": l_cls.item(), "iou": l_iou.item(), "l1": l_1.item()}
    return total, parts


def sd_loss(clean: Sequence[Tensor], masked: Sequence[Tensor], detach: bool = True) -> Tensor:
    """Mean over fusion stages of the elementwise MSE between paths.

    With ``detach`` the clean features act as a constant teacher.
    """
    if len(clean) != len(masked) or not clean:
        raise ShapeError(f"stage lists differ or are empty: {len(clean)} vs {len(masked)}")
    terms = []
    for h, ht in zip(clean, masked):
        if h.shape != ht.shape:
            raise ShapeError(f"feature shapes differ: {h.shape} vs {ht.shape}")
        teacher = Tensor(h.data) if detach else h
        d = ht - teacher
        terms.append(T.mean(d * d))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(terms))


def total_loss(l_clean, l_mask, l_sd, w: LossWeights):
    if isinstance(l_clean, Tensor):
        return l_clean + T.scale(l_mask, w.alpha) + T.scale(l_sd, w.beta)
    return l_clean + w.alpha * l_mask + w.beta * l_sd
