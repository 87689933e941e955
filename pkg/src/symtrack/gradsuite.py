"""Finite-difference checks for every op class and for the full training loss.

Every case builds its graph in float64. Inputs to kinked ops (relu, abs,
max/min, clip) are pushed away from the kink so a central difference never
straddles it.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import LossWeights, MaskConfig, ModelConfig, RunConfig
from .gradcheck import GradCheckReport, finite_diff_check
from .losses import focal_loss, giou, sd_loss
from .masking import draw_batch
from .model import Params, SymTracker, adapter, build_fusion_mask, msa
from .tensor import Tensor, backward

F64 = np.float64


def _leaf(rng, *shape, lo=None, scale=1.0) -> Tensor:
    a = rng.standard_normal(shape) * scale
    if lo is not None:
        a = np.sign(a) * (np.abs(a) + lo)
    return Tensor(a.astype(F64), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    # a random projection so every output element contributes a distinct weight;
    # the 1/sqrt(n) scale keeps f near unit size, which keeps difference roundoff small
    w = Tensor(rng.standard_normal(out.shape) / np.sqrt(out.size))
    return T.tsum(out * w)


class _Frozen:
    """Replays one draw of projection weights on every call."""

    def __init__(self, rng):
        self.rng = rng
        self.cache = {}

    def standard_normal(self, shape):
        if shape not in self.cache:
            self.cache[shape] = self.rng.standard_normal(shape)
        return self.cache[shape]


def _unary(op, lo=None, positive=False):
    def build(rng):
        x = _leaf(rng, 3, 5, lo=lo)
        if positive:
            x = Tensor(np.abs(x.data) + 0.2, requires_grad=True)
        proj = _Frozen(rng)
        return (lambda: _weighted(op(x), proj)), [x]
    return build


def _binary(op, gap=None):
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
        if op is T.div:
            b = Tensor(np.abs(b.data) + 0.5, requires_grad=True)
        if gap is not None:
            d = a.data - b.data
            a = Tensor(b.data + np.sign(d) * (np.abs(d) + gap), requires_grad=True)
        proj = _Frozen(rng)
        return (lambda: _weighted(op(a, b), proj)), [a, b]
    return build


def _clip_case(rng):
    x = rng.standard_normal((4, 5)) * 2
    # keep clear of the bounds at -1 and 1
    x = np.where(np.abs(np.abs(x) - 1) < 0.05, x + 0.1, x)
    x = Tensor(x, requires_grad=True)
    proj = _Frozen(rng)
    return (lambda: _weighted(T.clip(x, -1.0, 1.0), proj)), [x]


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    proj = _Frozen(rng)
    return (lambda: _weighted(T.matmul(a, b), proj)), [a, b]


def _standardize(rng):
    x = _leaf(rng, 2, 3, 4, 5)
    proj = _Frozen(rng)
    return (lambda: _weighted(T.standardize(x, (0, 1, 2), 1e-5), proj)), [x]


def _layer_norm(rng):
    x, g, b = _leaf(rng, 4, 8), _leaf(rng, 8), _leaf(rng, 8)
    proj = _Frozen(rng)
    return (lambda: _weighted(T.layer_norm(x, g, b), proj)), [x, g, b]


def _softmax(rng):
    x = _leaf(rng, 2, 6, 6)
    blocked = build_fusion_mask(3, 3)
    proj = _Frozen(rng)
    return (lambda: _weighted(T.masked_softmax(x, blocked), proj)), [x]


def _row_mask(rng):
    x = _leaf(rng, 2, 5, 3)
    m = rng.random((2, 5)) < 0.4
    proj = _Frozen(rng)
    return (lambda: _weighted(T.apply_row_mask(x, m), proj)), [x]


def _shape_ops(rng):
    x, y = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 2, 4)
    proj = _Frozen(rng)

    def f():
        c = T.concat([x, y], axis=1)
        r = T.reshape(T.transpose(c, (0, 2, 1)), (2, 20))
        return _weighted(r, proj)
    return f, [x, y]


def _index(rng):
    x = _leaf(rng, 3, 2, 4, 4)
    # the repeated (b, r, c) triple checks that gradients accumulate
    b, r, c = np.array([0, 0, 2]), np.array([1, 1, 3]), np.array([0, 0, 2])
    proj = _Frozen(rng)
    return (lambda: _weighted(x[b, :, r, c], proj) + _weighted(x[1:, 0], proj)), [x]


def _reductions(rng):
    x = _leaf(rng, 3, 4, 5)
    proj = _Frozen(rng)
    return (lambda: _weighted(T.tsum(x, axis=1), proj) + _weighted(T.mean(x, axis=(0, 2)), proj)
            + T.mean(x)), [x]


def _conv(rng):
    x, w, b = _leaf(rng, 2, 5, 5, 3), _leaf(rng, 3, 3, 3, 2), _leaf(rng, 2)
    proj = _Frozen(rng)
    return (lambda: _weighted(T.conv2d(x, w, b), proj)), [x, w, b]


def _giou(rng):
    while True:
        c = rng.uniform(0.3, 0.7, (4, 2))
        pred = np.concatenate([c, rng.uniform(0.1, 0.3, (4, 2))], axis=1)
        gt = np.concatenate([c + rng.uniform(-0.08, 0.08, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))], axis=1)
        lo_p, lo_g = pred[:, :2] - pred[:, 2:] / 2, gt[:, :2] - gt[:, 2:] / 2
        hi_p, hi_g = pred[:, :2] + pred[:, 2:] / 2, gt[:, :2] + gt[:, 2:] / 2
        # resample until no pair of corresponding edges nearly coincides (max/min kinks)
        if min(np.abs(lo_p - lo_g).min(), np.abs(hi_p - hi_g).min()) > 0.01:
            break
    pred = Tensor(pred, requires_grad=True)
    return (lambda: T.tsum(giou(pred, gt))), [pred]


def _focal(rng):
    score = _leaf(rng, 2, 4, 4)
    target = np.exp(-rng.uniform(0, 3, (2, 4, 4)))
    target[0, 1, 2] = target[1, 3, 0] = 1.0
    return (lambda: focal_loss(score, target, 2.0, 4.0)), [score]


def _sd(rng):
    a, b = _leaf(rng, 2, 6, 4), _leaf(rng, 2, 6, 4)
    teacher = [Tensor(rng.standard_normal((2, 6, 4)))]
    return (lambda: sd_loss(teacher + [teacher[0]], [a, b], detach=True)), [a, b]


def _adapter(rng):
    p = Params({"down.w": _leaf(rng, 6, 3), "down.b": _leaf(rng, 3),
                "up.w": _leaf(rng, 3, 6), "up.b": _leaf(rng, 6)})
    x = _leaf(rng, 2, 4, 6)
    proj = _Frozen(rng)
    return (lambda: _weighted(adapter(x, p), proj)), [x, *p.values()]


def _attention(rng):
    D = 8
    # 1/sqrt(D) weights keep the softmax out of saturation, as at initialisation
    p = Params({"attn.qkv.w": _leaf(rng, D, 3 * D, scale=D ** -0.5), "attn.qkv.b": _leaf(rng, 3 * D),
                "attn.proj.w": _leaf(rng, D, D, scale=D ** -0.5), "attn.proj.b": _leaf(rng, D)})
    x = _leaf(rng, 2, 6, D)
    blocked = build_fusion_mask(3, 3)
    proj = _Frozen(rng)
    return (lambda: _weighted(msa(x, p, 2, blocked), proj)), [x, *p.values()]


OP_CASES: dict[str, Callable] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "gelu": _unary(T.gelu),
    "relu": _unary(T.relu, lo=0.05),
    "sigmoid": _unary(T.sigmoid),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "absolute": _unary(T.absolute, lo=0.05),
    "maximum": _binary(T.maximum, gap=0.05),
    "minimum": _binary(T.minimum, gap=0.05),
    "clip": _clip_case,
    "matmul": _matmul,
    "standardize": _standardize,
    "layer_norm": _layer_norm,
    "masked_softmax": _softmax,
    "apply_row_mask": _row_mask,
    "reshape_transpose_concat": _shape_ops,
    "index": _index,
    "sum_mean": _reductions,
    "conv2d": _conv,
    "giou": _giou,
    "focal": _focal,
    "sd_loss": _sd,
    "adapter": _adapter,
    "attention": _attention,
}


def check_op(name: str, seed: int, eps: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Fourth-order central differences at ``eps=1e-3``: truncation and
    roundoff both stay near 1e-13, far under the 1e-8 relative-error floor."""
    f, params = OP_CASES[name](np.random.default_rng(seed))
    return finite_diff_check(f, params, eps=eps, tol=tol, stencil=4)


# ---------------------------------------------------------------- full model

def micro_run_config(model: ModelConfig | None = None) -> RunConfig:
    cfg = RunConfig(model=model or ModelConfig.micro())
    return replace(cfg, train=replace(cfg.train, batch_size=2))


def random_micro_batch(cfg: ModelConfig, rng: np.random.Generator, batch: int = 2):
    """Random images plus ground-truth boxes kept inside the search crop."""
    from .trainer import Batch

    def img(size):
        return rng.uniform(0, 1, (batch, size, size, cfg.in_chans))

    c = rng.uniform(0.3, 0.7, (batch, 2))
    s = rng.uniform(0.15, 0.4, (batch, 2))
    return Batch(img(cfg.template_size), img(cfg.template_size), img(cfg.search_size),
                 img(cfg.search_size), np.concatenate([c, s], axis=1))


def micro_model(cfg: ModelConfig, seed: int, up_std: float = 0.2) -> SymTracker:
    """float64 model with adapters whose up-projections are non-zero,
    so gradients reach every adapter weight."""
    rng = np.random.default_rng(seed)
    model = SymTracker(cfg, rng, dtype=F64)
    model.init_adaptation(rng, adapter_std=0.3)
    for name, t in model.params.items():
        if ".up." in name:
            t.data[...] = rng.standard_normal(t.shape) * up_std
    return model


def key_bias_positions(name: str, size: int) -> np.ndarray:
    """Flat positions of the key bias inside a fused qkv bias, empty otherwise.

    Adding a constant to every key shifts each attention logit row by the
    same amount, which softmax ignores, so these gradients are exactly zero.
    """
    if not name.endswith("attn.qkv.b"):
        return np.zeros(0, dtype=np.int64)
    return np.arange(size // 3, 2 * size // 3)


def sample_indices(params, per_tensor: Optional[int], rng, exclude=None) -> Optional[list]:
    """Up to ``per_tensor`` distinct flat positions from every tensor (None: all).

    ``exclude`` lists per tensor positions that are never returned.
    """
    if per_tensor is None and exclude is None:
        return None
    out = []
    for k, p in enumerate(params):
        pool = np.arange(p.size)
        if exclude is not None:
            pool = np.setdiff1d(pool, exclude[k])
        if per_tensor is not None:
            pool = np.sort(rng.choice(pool, size=min(per_tensor, pool.size), replace=False))
        out.append(pool)
    return out


def micro_objective(cfg: ModelConfig, seed: int, weights: LossWeights | None = None,
                    mask: MaskConfig | None = None, stage: str = "full"):
    """L_track of a seeded micro model on a random batch, with a fixed teacher.

    Returns ``(f, named)`` where ``f()`` rebuilds the loss from the current
    parameter values and ``named`` lists the trainable ``(name, tensor)`` pairs.
    """
    from .trainer import adapt_step

    run = micro_run_config(cfg)
    run = replace(run, loss=weights or run.loss, mask=mask or run.mask)
    model = micro_model(cfg, seed)
    model.set_stage(stage)
    rng = np.random.default_rng([seed, 1])
    batch = random_micro_batch(cfg, rng)
    masks = draw_batch(2, cfg.n_tokens, run.mask.rho_primary, run.mask.rho_secondary, rng)
    e_rgb = model.embed(batch.z_rgb, batch.x_rgb, "rgb")
    e_x = model.embed(batch.z_x, batch.x_x, "x")
    _, feats = model.forward_embeds(e_rgb, e_x)
    teacher = [f.data.copy() for f in feats]

    def f():
        loss, _ = adapt_step(model, batch, masks, run, force_masked=True, teacher=teacher)
        return loss

    return f, list(model.trainable())


def model_gradcheck(cfg: ModelConfig, seed: int, eps: float = 1e-5, tol: float = 1e-3,
                    weights: LossWeights | None = None, mask: MaskConfig | None = None,
                    stage: str = "full", per_tensor: Optional[int] = None,
                    stencil: int = 2) -> GradCheckReport:
    """Check d L_track / d theta over the trainable scalars of a micro model.

    Both forward paths and the distillation term are included; the teacher
    side is held fixed exactly as the detached teacher is during training.
    ``per_tensor`` samples that many scalars from every trainable tensor
    instead of checking all of them. Key biases are left to
    ``key_bias_gradcheck``: their true gradient is zero, so a relative error
    against finite-difference roundoff says nothing.
    """
    f, named = micro_objective(cfg, seed, weights, mask, stage)
    params = [t for _, t in named]
    exclude = [key_bias_positions(n, t.size) for n, t in named]
    idx = sample_indices(params, per_tensor, np.random.default_rng([seed, 2]), exclude)
    return finite_diff_check(f, params, eps=eps, tol=tol, indices=idx, stencil=stencil)


def key_bias_gradcheck(cfg: ModelConfig, seed: int, eps: float = 1e-5,
                       stage: str = "full") -> tuple[float, float]:
    """Largest |tape gradient| and |central difference| over every key bias scalar.

    Both should sit at roundoff level: the tape value near 1e-16 times the
    loss scale, the difference near ulp(L) / eps.
    """
    f, named = micro_objective(cfg, seed, stage=stage)
    for _, t in named:
        t.grad = None
    backward(f())
    tape, fd = 0.0, 0.0
    for name, t in named:
        pos = key_bias_positions(name, t.size)
        if not pos.size:
            continue
        g = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.data.flat
        for i in pos:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            tape = max(tape, abs(float(g[i])))
            fd = max(fd, abs(up - down) / (2 * eps))
    for _, t in named:
        t.grad = None
    return tape, fd
