"""Two-stage training: single-modality pretraining, then adapter tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig
from .losses import sd_loss, total_loss, tracking_loss
from .masking import draw_batch
from .model import SymTracker
from .synthdata import CropGeom, crop_pair, sequence_pool, template_geom
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

# fields that must agree between a pretrained checkpoint and the adaptation config
BACKBONE_FIELDS = ("depth", "dim", "heads", "mlp_ratio", "patch", "in_chans", "template_size",
                   "search_size", "head_layers", "head_channels")


class TrainingDiverged(NumericError):
    pass


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Sequence[tuple[str, Tensor]], state: OptimState, lr: Optional[float] = None) -> None:
    """One AdamW update in place.

    Weight decay is decoupled: each parameter is shrunk by ``1 - lr*wd``
    before the bias-corrected Adam step is applied. Tensors without
    ``requires_grad`` or without a gradient are left alone.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p.data *= p.dtype.type(1.0 - lr * state.weight_decay)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * upd).astype(p.dtype, copy=False)


def clip_grad_norm(params: Sequence[tuple[str, Tensor]], max_norm: float) -> float:
    grads = [p.grad for _, p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = (p.grad * k).astype(p.dtype)
    return norm


def lr_at(base: float, step: int, total: int, cosine: bool) -> float:
    if not cosine or total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------- data

@dataclass
class Batch:
    z_rgb: np.ndarray
    z_x: np.ndarray
    x_rgb: np.ndarray
    x_x: np.ndarray
    gt: np.ndarray


def sample_batch(seqs, rng: np.random.Generator, cfg: ModelConfig, train: TrainConfig,
                 batch_size: Optional[int] = None) -> Batch:
    """Template/search pairs with a jittered search centre and scale."""
    B = batch_size or train.batch_size
    zr, zx, xr, xx, gts = [], [], [], [], []
    for _ in range(B):
        seq = seqs[int(rng.integers(len(seqs)))]
        n = len(seq)
        t_search = int(rng.integers(1, n))
        both = np.flatnonzero(seq.codes == 0)
        t_tmpl = int(rng.choice(both))
        zf, xf = seq[t_tmpl], seq[t_search]
        size = zf.img_rgb.shape[0]
        tg = template_geom(zf.gt, size)
        gt_px = xf.gt * size
        side = 4.0 * math.sqrt(gt_px[2] * gt_px[3]) * math.exp(rng.uniform(-train.scale_jitter, train.scale_jitter))
        shift = rng.uniform(-train.center_jitter, train.center_jitter, size=2) * side
        sg = CropGeom(float(gt_px[0] + shift[0]), float(gt_px[1] + shift[1]), float(side), size)
        zc, xc = crop_pair(zf, tg, cfg.template_size), crop_pair(xf, sg, cfg.search_size)
        zr.append(zc.rgb), zx.append(zc.x), xr.append(xc.rgb), xx.append(xc.x)
        gts.append(sg.to_crop(xf.gt))
    return Batch(np.stack(zr), np.stack(zx), np.stack(xr), np.stack(xx), np.stack(gts))


# ---------------------------------------------------------------- loops

def _streams(seed: int) -> dict:
    roles = ("init", "pool", "sampler", "masks", "adapters")
    kids = np.random.SeedSequence(seed).spawn(len(roles))
    return dict(zip(roles, kids))


class JsonlLog:
    """Append-only JSON-lines writer; timestamps live in their own field."""

    def __init__(self, path=None, sink: Optional[Callable[[dict], None]] = None):
        self.path = path
        self.sink = sink
        self.records: list[dict] = []
        if path is not None:
            open(path, "w").close()

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps({**rec, "timestamp": time.time()}) + "\n")
        if self.sink is not None:
            self.sink(rec)


def _check(loss: Tensor, step: int, what: str) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDiverged(f"{what} loss became non-finite at step {step}")


def pretrain(cfg: RunConfig, epochs: Optional[int] = None, steps: Optional[int] = None,
             logger: Optional[JsonlLog] = None) -> Checkpoint:
    """Train the RGB stream and head on single-modality sequences."""
    tc = cfg.train
    streams = _streams(cfg.seed)
    model = SymTracker(cfg.model, np.random.default_rng(streams["init"]))
    model.set_stage("pretrain")
    n_steps = steps if steps is not None else (tc.pretrain_epochs if epochs is None else epochs) * tc.steps_per_epoch
    seqs = sequence_pool(cfg.data, tc.n_sequences, int(streams["pool"].generate_state(1)[0]),
                         single_modality=True)
    rng = np.random.default_rng(streams["sampler"])
    opt = OptimState(tc.lr_pretrain, tc.weight_decay, tc.beta1, tc.beta2, tc.eps)
    params = model.trainable()
    model.training = True
    for step in range(n_steps):
        batch = sample_batch(seqs, rng, cfg.model, tc)
        try:
            out = model.forward_rgb(batch.z_rgb, batch.x_rgb)
            loss, parts = tracking_loss(out, batch.gt, cfg.loss)
        except NumericError as exc:
            raise TrainingDiverged(f"pretrain step {step}: {exc}") from exc
        _check(loss, step, "pretrain")
        model.zero_grad()
        T.backward(loss)
        clip_grad_norm(params, tc.grad_clip)
        lr = lr_at(tc.lr_pretrain, step, n_steps, tc.cosine)
        adamw_step(params, opt, lr)
        if logger is not None:
            logger.write({"stage": "pretrain", "step": step, "l_clean": loss.item(), **parts, "lr": lr})
    model.training = False
    return checkpoint_from_model(model, {"seed": cfg.seed, "steps": n_steps, "stage": "pretrain"})


def check_compatible(pre: ModelConfig, cfg: ModelConfig) -> None:
    bad = [f for f in BACKBONE_FIELDS if getattr(pre, f) != getattr(cfg, f)]
    if bad:
        raise ConfigError(f"pretrained checkpoint disagrees with config on {', '.join(bad)}")


def prepare_adaptation(pretrained: Checkpoint, cfg: RunConfig) -> SymTracker:
    check_compatible(pretrained.model, cfg.model)
    if pretrained.stage != "pretrain":
        raise ConfigError(f"expected a pretrain-stage checkpoint, got {pretrained.stage!r}")
    model = model_from_checkpoint(pretrained)
    model.cfg = cfg.model
    model.init_adaptation(np.random.default_rng(_streams(cfg.seed)["adapters"]))
    model.training = False
    return model


def adapt_step(model: SymTracker, batch: Batch, masks, cfg: RunConfig, force_masked: bool = False,
               teacher: Optional[Sequence[np.ndarray]] = None) -> tuple[Tensor, dict]:
    """Forward both paths and return ``L_track`` with its components.

    ``teacher`` replaces the clean-path fusion features in the distillation
    term by fixed arrays, which is what a detached teacher looks like to a
    finite-difference probe.
    """
    w = cfg.loss
    e_rgb = model.embed(batch.z_rgb, batch.x_rgb, "rgb")
    e_x = model.embed(batch.z_x, batch.x_x, "x")
    out_c, feats_c = model.forward_embeds(e_rgb, e_x)
    l_clean, _ = tracking_loss(out_c, batch.gt, w)
    zero = Tensor(np.zeros((), dtype=l_clean.dtype))
    l_mask = l_sd = zero
    if w.alpha or w.beta or force_masked:
        out_m, feats_m = model.forward_embeds(e_rgb, e_x, masks[0], masks[1])
        l_mask, _ = tracking_loss(out_m, batch.gt, w)
        if feats_c:
            if teacher is not None:
                feats_c = [Tensor(a) for a in teacher]
            l_sd = sd_loss(feats_c, feats_m, detach=w.detach_teacher)
    l_track = total_loss(l_clean, l_mask, l_sd, w)
    return l_track, {"l_clean": l_clean.item(), "l_mask": l_mask.item(), "l_sd": l_sd.item(),
                     "l_track": l_track.item()}


def adapt(pretrained: Checkpoint, cfg: RunConfig, epochs: Optional[int] = None,
          steps: Optional[int] = None, logger: Optional[JsonlLog] = None,
          force_masked: bool = False, on_step: Optional[Callable] = None) -> Checkpoint:
    """Freeze the pretrained tracker and tune adapters, X embed and pre-head LN."""
    tc = cfg.train
    streams = _streams(cfg.seed)
    model = prepare_adaptation(pretrained, cfg)
    n_steps = steps if steps is not None else (tc.adapt_epochs if epochs is None else epochs) * tc.steps_per_epoch
    seqs = sequence_pool(cfg.data, tc.n_sequences, int(streams["pool"].generate_state(1)[0]))
    rng = np.random.default_rng(streams["sampler"])
    mask_rng = np.random.default_rng(streams["masks"])
    opt = OptimState(tc.lr_adapt, tc.weight_decay, tc.beta1, tc.beta2, tc.eps)
    params = model.trainable()
    for step in range(n_steps):
        batch = sample_batch(seqs, rng, cfg.model, tc)
        # masks are drawn every step so runs with and without the masked path see the same data
        masks = draw_batch(len(batch.gt), cfg.model.n_tokens, cfg.mask.rho_primary,
                           cfg.mask.rho_secondary, mask_rng)
        try:
            loss, parts = adapt_step(model, batch, masks, cfg, force_masked)
        except NumericError as exc:
            raise TrainingDiverged(f"adapt step {step}: {exc}") from exc
        _check(loss, step, "adapt")
        model.zero_grad()
        T.backward(loss)
        clip_grad_norm(params, tc.grad_clip)
        lr = lr_at(tc.lr_adapt, step, n_steps, tc.cosine)
        adamw_step(params, opt, lr)
        if logger is not None:
            logger.write({"stage": "adapt", "step": step, **parts, "lr": lr})
        if on_step is not None:
            on_step(step, model)
    meta = {"seed": cfg.seed, "steps": n_steps, "stage": "adapt",
            "alpha": cfg.loss.alpha, "beta": cfg.loss.beta,
            "rho": [cfg.mask.rho_primary, cfg.mask.rho_secondary]}
    return checkpoint_from_model(model, meta)


def ablated(cfg: RunConfig) -> RunConfig:
    """Same run without masking and self-distillation (SMA only)."""
    return replace(cfg, loss=replace(cfg.loss, alpha=0.0, beta=0.0),
                   mask=replace(cfg.mask, rho_primary=0.0, rho_secondary=0.0))
