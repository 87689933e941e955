import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symtrack.metrics import (compute_metrics, f_score, iou, longterm_f, precision_curve, success_auc,
                              success_curve)


# ---------------------------------------------------------------- brute-force oracles

def oracle_iou(a, b):
    ax1, ax2 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay1, ay2 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx1, bx2 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by1, by2 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def oracle_success(pred, gt, vis):
    total = 0
    for k in range(101):
        tau = k / 100
        for p, g, v in zip(pred, gt, vis):
            if v and oracle_iou(p, g) > tau:
                total += 1
    return total / (sum(vis) * 101)


def oracle_precision(pred, gt, vis, px):
    out = []
    n = sum(vis)
    for th in range(51):
        hits = 0
        for p, g, v in zip(pred, gt, vis):
            d = math.sqrt(((p[0] - g[0]) * px) ** 2 + ((p[1] - g[1]) * px) ** 2)
            if v and d <= th:
                hits += 1
        out.append(hits / n)
    return out


def oracle_longterm(pred, conf, gt, vis):
    best = (0.0, 0.0, 0.0)
    n_vis = sum(vis)
    for k in range(100):
        tau = k / 99
        rep = [i for i in range(len(pred)) if conf[i] >= tau]
        if not rep:
            continue
        ious = [oracle_iou(pred[i], gt[i]) if vis[i] else 0.0 for i in rep]
        pr = math.fsum(ious) / len(rep)
        re = math.fsum(oracle_iou(pred[i], gt[i]) for i in rep if vis[i]) / n_vis
        f = 2 * pr * re / (pr + re) if pr + re > 0 else 0.0
        if f > best[2]:
            best = (pr, re, f)
    return best


def micro_case(seed, n=20):
    rng = np.random.default_rng(seed)
    gt = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))])
    pred = gt + np.column_stack([rng.normal(0, 0.08, (n, 2)), rng.normal(0, 0.05, (n, 2))])
    pred[:, 2:] = np.abs(pred[:, 2:]) + 0.01
    lost = rng.random(n) < 0.2
    pred[lost, :2] = rng.uniform(0, 1, (int(lost.sum()), 2))
    conf = rng.random(n)
    vis = rng.random(n) > 0.15
    vis[0] = True
    return pred, conf, gt, vis


@pytest.mark.parametrize("seed", range(50))
def test_metrics_equal_brute_force_oracles(seed):
    pred, conf, gt, vis = micro_case(seed)
    P, G, V = pred.tolist(), gt.tolist(), vis.tolist()
    assert success_auc(pred, gt, vis) == oracle_success(P, G, V)
    curve, p20 = precision_curve(pred, gt, vis, image_px=128.0)
    assert curve.tolist() == oracle_precision(P, G, V, 128.0)
    assert p20 == curve[20]
    assert longterm_f(pred, conf, gt, vis) == oracle_longterm(P, conf.tolist(), G, V)


# ---------------------------------------------------------------- examples

def test_f_score_table_value():
    assert f_score(0.619, 0.609) == pytest.approx(0.614, abs=5e-4)


def test_f_score_equal_values():
    for x in (0.1, 0.5, 0.93):
        assert f_score(x, x) == pytest.approx(x, rel=1e-15)
    assert f_score(0.0, 0.0) == 0.0


def test_perfect_tracking():
    gt = np.tile([0.5, 0.5, 0.2, 0.2], (10, 1))
    assert success_auc(gt, gt) == pytest.approx(100 / 101)
    assert success_auc(gt, gt) >= 0.99
    curve, p20 = precision_curve(gt, gt)
    assert np.all(curve == 1.0) and p20 == 1.0
    assert longterm_f(gt, np.ones(10), gt) == pytest.approx((1.0, 1.0, 1.0), abs=1e-12)


def test_disjoint_tracking_is_zero():
    gt = np.tile([0.2, 0.2, 0.1, 0.1], (5, 1))
    pred = np.tile([0.8, 0.8, 0.1, 0.1], (5, 1))
    assert success_auc(pred, gt) == 0.0


def test_constant_offset_precision_step():
    gt = np.tile([0.5, 0.5, 0.1, 0.1], (4, 1))
    pred = gt + [30 / 128, 0, 0, 0]
    curve, p20 = precision_curve(pred, gt, image_px=128.0)
    assert np.all(curve[:30] == 0.0) and np.all(curve[30:] == 1.0) and p20 == 0.0


def test_no_visible_frames_raises():
    gt = np.tile([0.5, 0.5, 0.1, 0.1], (3, 1))
    with pytest.raises(ValueError):
        success_auc(gt, gt, [False] * 3)


def test_iou_symmetric_and_bounded(rng):
    a = np.column_stack([rng.random((30, 2)), rng.uniform(0.01, 0.5, (30, 2))])
    b = np.column_stack([rng.random((30, 2)), rng.uniform(0.01, 0.5, (30, 2))])
    np.testing.assert_array_equal(iou(a, b), iou(b, a))
    assert np.all((iou(a, b) >= 0) & (iou(a, b) <= 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_curves_are_monotone_and_f_identity_holds(seed):
    pred, conf, gt, vis = micro_case(seed, n=15)
    assert np.all(np.diff(success_curve(pred, gt, vis)) <= 0)
    curve, _ = precision_curve(pred, gt, vis)
    assert np.all(np.diff(curve) >= 0)
    pr, re, f = longterm_f(pred, conf, gt, vis)
    assert 0 <= pr <= 1 and 0 <= re <= 1
    assert f == f_score(pr, re)


def test_compute_metrics_fields():
    pred, conf, gt, vis = micro_case(0)
    m = compute_metrics(pred, conf, gt, vis, image_px=64.0).as_dict()
    assert set(m) == {"precision_at", "precision_20", "success_auc", "pr", "re", "f_score", "n_frames"}
    assert m["precision_at"]["20"] == m["precision_20"] and m["n_frames"] == 20
