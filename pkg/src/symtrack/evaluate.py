"""Sequence tracking loop and the robustness evaluation protocol."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Perturbation, RunConfig, config_hash
from .metrics import (IOU_THRESHOLDS, PIXEL_THRESHOLDS, TrackMetrics, compute_metrics,
                      precision_curve, success_auc, success_curve)
from .model import SymTracker, decode_box
from .synthdata import crop_pair, perturb, search_geom, sequence_pool, template_geom

KIND_CODES = {"none": 0, "drop_rgb": 1, "drop_x": 2, "occlude": 3}
MIN_BOX_PX = 4.0
MAX_BOX_FRAC = 0.5


@dataclass
class TrackResult:
    """Predictions for one sequence, frame 0 (the initialisation frame) excluded."""

    pred: np.ndarray
    conf: np.ndarray
    gt: np.ndarray
    visible: np.ndarray


@dataclass
class ConditionResult:
    condition: str
    metrics: TrackMetrics
    per_sequence_auc: list = field(default_factory=list)
    success: np.ndarray = None
    precision: np.ndarray = None


def _clamp(box: np.ndarray, frame: int) -> np.ndarray:
    out = box.copy()
    out[..., :2] = np.clip(out[..., :2], 0.0, 1.0)
    out[..., 2:] = np.clip(out[..., 2:], MIN_BOX_PX / frame, MAX_BOX_FRAC)
    return out


def perturbation_rng(seed: int, seq_index: int, p: Perturbation) -> np.random.Generator:
    """Per-sequence stream, shared by every model evaluated under the same seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, seq_index, KIND_CODES[p.kind], p.seed]))


def track(model: Optional[SymTracker], seqs, p: Perturbation, seed: int) -> list[TrackResult]:
    """Run the tracker over all sequences, batching one frame across sequences.

    The template comes from the clean first frame; every later frame may be
    perturbed, and its search crop is centred on the previous prediction.
    ``model=None`` runs the blind centre-prior tracker, which always reports
    the centre of its search region at the previous size.
    """
    n = len(seqs[0])
    if any(len(s) != n for s in seqs):
        raise ValueError("sequences must share one length for batched tracking")
    rngs = [perturbation_rng(seed, i, p) for i in range(len(seqs))]
    first = [s[0] for s in seqs]
    frame = first[0].img_rgb.shape[0]
    prev = np.stack([f.gt for f in first])
    if model is not None:
        cfg = model.cfg
        tmpl = [crop_pair(f, template_geom(f.gt, frame), cfg.template_size) for f in first]
        z_rgb = np.stack([c.rgb for c in tmpl]).astype(model.dtype)
        z_x = np.stack([c.x for c in tmpl]).astype(model.dtype)
        model.training = False
    preds, confs, gts, vis = [], [], [], []
    for t in range(1, n):
        frames = [perturb(s[t], p, rngs[i]) for i, s in enumerate(seqs)]
        if model is None:
            box = prev.copy()
            conf = np.ones(len(seqs))
        else:
            geoms = [search_geom(prev[i], frame) for i in range(len(seqs))]
            crops = [crop_pair(f, g, cfg.search_size) for f, g in zip(frames, geoms)]
            x_rgb = np.stack([c.rgb for c in crops]).astype(model.dtype)
            x_x = np.stack([c.x for c in crops]).astype(model.dtype)
            if model.adapted:
                out, _ = model.forward(z_rgb, z_x, x_rgb, x_x)
            else:
                out = model.forward_rgb(z_rgb, x_rgb)
            local, conf = decode_box(out.score, out.offset, out.size)
            box = np.stack([g.to_frame(b) for g, b in zip(geoms, local)])
            box = _clamp(box, frame)
        preds.append(box)
        confs.append(conf)
        gts.append(np.stack([f.gt for f in frames]))
        vis.append(np.array([f.visible for f in frames]))
        prev = box
    P, C, G, V = (np.stack(a, axis=1) for a in (preds, confs, gts, vis))
    return [TrackResult(P[i], C[i], G[i], V[i]) for i in range(len(seqs))]


def evaluate_condition(model, seqs, p: Perturbation, seed: int, image_px: float) -> ConditionResult:
    results = track(model, seqs, p, seed)
    pred = np.concatenate([r.pred for r in results])
    conf = np.concatenate([r.conf for r in results])
    gt = np.concatenate([r.gt for r in results])
    vis = np.concatenate([r.visible for r in results])
    metrics = compute_metrics(pred, conf, gt, vis, image_px)
    per_seq = [success_auc(r.pred, r.gt, r.visible) for r in results]
    curve, _ = precision_curve(pred, gt, vis, image_px)
    return ConditionResult(p.label, metrics, per_seq, success_curve(pred, gt, vis), curve)


def held_out_sequences(cfg: RunConfig):
    return sequence_pool(cfg.data, cfg.eval.n_sequences, cfg.seed + cfg.eval.seed_offset)


def robustness_suite(model, seqs, conditions: Sequence[Perturbation], seed: int,
                     image_px: float = 128.0) -> dict[str, ConditionResult]:
    """Metrics per condition; inference always runs the clean path."""
    return {p.label: evaluate_condition(model, seqs, p, seed, image_px) for p in conditions}


def deltas(table: dict[str, ConditionResult], clean: str = "clean") -> dict[str, dict]:
    """Clean-minus-perturbed difference for each scalar metric."""
    if clean not in table:
        return {}
    base = table[clean].metrics
    keys = ("precision_20", "success_auc", "pr", "re", "f_score")
    return {name: {k: getattr(base, k) - getattr(r.metrics, k) for k in keys}
            for name, r in table.items() if name != clean}


def report_records(table: dict[str, ConditionResult], seed: int, cfg_hash: str) -> list[dict]:
    d = deltas(table)
    recs = []
    for name, r in table.items():
        rec = {"condition": name, **r.metrics.as_dict(), "per_sequence_auc": r.per_sequence_auc,
               "seed": seed, "config_hash": cfg_hash}
        if name in d:
            rec["delta"] = d[name]
        recs.append(rec)
    return recs


def write_jsonl(records: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_curves(table: dict[str, ConditionResult], path) -> Path:
    """CSV with one row per (condition, curve, threshold)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "curve", "threshold", "rate"])
        for name, r in table.items():
            for th, v in zip(IOU_THRESHOLDS, r.success):
                w.writerow([name, "success", f"{th:.2f}", repr(float(v))])
            for th, v in zip(PIXEL_THRESHOLDS, r.precision):
                w.writerow([name, "precision", int(th), repr(float(v))])
    return path


def run_eval(model, cfg: RunConfig, conditions: Optional[Sequence[Perturbation]] = None
             ) -> tuple[dict[str, ConditionResult], list[dict]]:
    conds = cfg.eval.conditions if conditions is None else conditions
    seqs = held_out_sequences(cfg)
    table = robustness_suite(model, seqs, conds, cfg.seed, cfg.eval.image_px)
    return table, report_records(table, cfg.seed, config_hash(cfg))
