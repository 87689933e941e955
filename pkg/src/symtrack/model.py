"""Two-stream adapter-augmented ViT tracker.

The RGB stream runs the pretrained blocks unchanged. The X stream runs the
same frozen blocks with two bottleneck adapters per block (one after
attention, one parallel to the MLP). After each block listed in
``fusion_layers`` the two streams are concatenated, passed once more through
that block under a cross-only attention mask with fusion adapters, and split
back. The head sees the sum of both search spans.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import ShapeError, Tensor

STAGES = ("pretrain", "adapt", "frozen", "full")
BRANCHES = ("ctr", "offset", "size")
BRANCH_OUT = {"ctr": 1, "offset": 2, "size": 2}


@dataclass
class TokenState:
    h_rgb: Tensor
    h_x: Optional[Tensor]
    n_z: int
    n_x: int

    def __post_init__(self):
        if self.h_x is not None and self.h_x.shape != self.h_rgb.shape:
            raise ShapeError(f"stream shapes differ: {self.h_rgb.shape} vs {self.h_x.shape}")
        if self.h_rgb.shape[-2] != self.n_z + self.n_x:
            raise ShapeError("token count does not match the template/search segment layout")

    @property
    def search_span(self) -> slice:
        return slice(self.n_z, self.n_z + self.n_x)


@dataclass
class HeadOutput:
    score: Tensor   # [B, S, S] logits
    offset: Tensor  # [B, 2, S, S]
    size: Tensor    # [B, 2, S, S], after sigmoid


class Params(dict):
    """Name -> Tensor mapping with prefix helpers."""

    def group(self, prefix: str) -> dict:
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def sub(self, prefix: str) -> "Params":
        n = len(prefix)
        return Params({k[n:]: v for k, v in self.items() if k.startswith(prefix)})


# ---------------------------------------------------------------- building blocks

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B,H,W,C] -> [B, (H/p)*(W/p), p*p*C], row-major over patches."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} is not divisible by patch {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def patch_embed(images, w: Tensor, b: Tensor, pos: Tensor, patch: int) -> Tensor:
    """Flatten non-overlapping patches, project, add position embeddings."""
    cols = patchify(images.data if isinstance(images, Tensor) else images, patch)
    if cols.shape[1] != pos.shape[0]:
        raise ShapeError(f"{cols.shape[1]} patches but {pos.shape[0]} position embeddings")
    x = Tensor(cols.astype(w.dtype, copy=False))
    return (x @ w + b) + pos


def linear(x: Tensor, p: Params, name: str) -> Tensor:
    return x @ p[name + ".w"] + p[name + ".b"]


def adapter(x: Tensor, p: Params) -> Tensor:
    """Bottleneck FC-down, GELU, FC-up with an internal residual."""
    return x + linear(T.gelu(linear(x, p, "down")), p, "up")


def msa(x: Tensor, p: Params, heads: int, blocked=None, probe: Optional[list] = None) -> Tensor:
    B, N, D = x.shape
    dh = D // heads
    qkv = linear(x, p, "attn.qkv").reshape(B, N, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = T.scale(q @ k.transpose(0, 1, 3, 2), dh ** -0.5)
    attn = T.masked_softmax(logits, blocked)
    if probe is not None:
        probe.append(attn.data.copy())
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    return linear(out, p, "attn.proj")


def mlp(x: Tensor, p: Params) -> Tensor:
    return linear(T.gelu(linear(x, p, "mlp.fc1")), p, "mlp.fc2")


def _ln(x: Tensor, p: Params, name: str, eps: float) -> Tensor:
    return T.layer_norm(x, p[name + ".g"], p[name + ".b"], eps)


def adapted_block(h: Tensor, blk: Params, cfg: ModelConfig, adapters: Optional[Params] = None,
                  r: float = 1.0, blocked=None, probe: Optional[list] = None) -> Tensor:
    """One ViT block, optionally with a post-attention and a parallel-MLP adapter."""
    if h.shape[-1] != cfg.dim:
        raise ShapeError(f"block expects width {cfg.dim}, got {h.shape}")
    a = msa(_ln(h, blk, "ln1", cfg.ln_eps), blk, cfg.heads, blocked, probe)
    if adapters is not None:
        a = adapter(a, adapters.sub("attn."))
    h1 = h + a
    z = _ln(h1, blk, "ln2", cfg.ln_eps)
    out = h1 + mlp(z, blk)
    if adapters is not None:
        out = out + T.scale(adapter(z, adapters.sub("mlp.")), r)
    return out


def vit_block_rgb(h: Tensor, blk: Params, cfg: ModelConfig, blocked=None, probe=None) -> Tensor:
    return adapted_block(h, blk, cfg, None, blocked=blocked, probe=probe)


def vit_block_cma(h: Tensor, blk: Params, adapters: Optional[Params], cfg: ModelConfig,
                  r: float) -> Tensor:
    if adapters is None or not adapters:
        raise ValueError("cross-modal block needs its two adapters")
    return adapted_block(h, blk, cfg, adapters, r)


def build_fusion_mask(n_rgb: int, n_x: int) -> np.ndarray:
    """Blocked-entry matrix over the concatenated [rgb; x] tokens.

    Intra-modality blocks are blocked, so every query attends only to the
    other modality.
    """
    if n_rgb < 1 or n_x < 1:
        raise ValueError("both modalities need at least one token")
    is_rgb = np.arange(n_rgb + n_x) < n_rgb
    return is_rgb[:, None] == is_rgb[None, :]


def fusion_stage(state: TokenState, blk: Params, adapters: Optional[Params], cfg: ModelConfig,
                 r: float, probe: Optional[list] = None) -> tuple[TokenState, Tensor]:
    n = state.h_rgb.shape[-2]
    fused_in = T.concat([state.h_rgb, state.h_x], axis=-2)
    if fused_in.shape[-2] % 2:
        raise ShapeError("concatenated token count is odd")
    blocked = build_fusion_mask(n, n)
    fused = adapted_block(fused_in, blk, cfg, adapters or None, r, blocked, probe)
    return TokenState(fused[..., :n, :], fused[..., n:, :], state.n_z, state.n_x), fused


# ---------------------------------------------------------------- model

class SymTracker:
    """Parameter container plus the forward passes of both training stages."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = Params()
        self.buffers: dict[str, np.ndarray] = {}
        self.training = False
        self.stage = "pretrain"
        rng = np.random.default_rng(0) if rng is None else rng
        self._init_params(rng)
        self.set_stage("pretrain")

    # -- construction

    def _new(self, name, shape, std=0.0, value=None, rng=None):
        if value is not None:
            data = np.full(shape, value, dtype=self.dtype)
        elif std:
            data = (rng.standard_normal(shape) * std).astype(self.dtype)
        else:
            data = np.zeros(shape, dtype=self.dtype)
        self.params[name] = Tensor(data, name=name)

    def _init_params(self, rng):
        c = self.cfg
        D, H = c.dim, c.mlp_hidden
        self._new("embed.rgb.w", (c.patch_dim, D), std=c.patch_dim ** -0.5, rng=rng)
        self._new("embed.rgb.b", (D,))
        self._new("pos.z", (c.template_tokens, D), std=0.02, rng=rng)
        self._new("pos.x", (c.search_tokens, D), std=0.02, rng=rng)
        for l in range(1, c.depth + 1):
            p = f"blocks.{l}."
            for ln in ("ln1", "ln2"):
                self._new(p + ln + ".g", (D,), value=1.0)
                self._new(p + ln + ".b", (D,))
            self._new(p + "attn.qkv.w", (D, 3 * D), std=D ** -0.5, rng=rng)
            self._new(p + "attn.qkv.b", (3 * D,))
            self._new(p + "attn.proj.w", (D, D), std=0.02, rng=rng)
            self._new(p + "attn.proj.b", (D,))
            self._new(p + "mlp.fc1.w", (D, H), std=D ** -0.5, rng=rng)
            self._new(p + "mlp.fc1.b", (H,))
            self._new(p + "mlp.fc2.w", (H, D), std=0.02, rng=rng)
            self._new(p + "mlp.fc2.b", (D,))
        self._new("head_norm.g", (D,), value=1.0)
        self._new("head_norm.b", (D,))
        widths = c.head_widths
        for br in BRANCHES:
            for j in range(c.head_layers):
                p = f"head.{br}.{j}."
                cin, cout = widths[j], widths[j + 1]
                self._new(p + "conv.w", (3, 3, cin, cout), std=(2.0 / (9 * cin)) ** 0.5, rng=rng)
                self._new(p + "conv.b", (cout,))
                self._new(p + "bn.g", (cout,), value=1.0)
                self._new(p + "bn.b", (cout,))
                self.buffers[p + "bn.mean"] = np.zeros(cout, dtype=self.dtype)
                self.buffers[p + "bn.var"] = np.ones(cout, dtype=self.dtype)
            self._new(f"head.{br}.out.w", (widths[-1], BRANCH_OUT[br]), std=widths[-1] ** -0.5, rng=rng)
            self._new(f"head.{br}.out.b", (BRANCH_OUT[br],))
        # X stream and adapters are created by ``init_adaptation``

    def init_adaptation(self, rng: np.random.Generator, adapter_std: float = 0.02) -> None:
        """Copy the RGB patch embedding into the X stream and add zero-output adapters."""
        c = self.cfg
        self.params["embed.x.w"] = Tensor(self.params["embed.rgb.w"].data.copy(), name="embed.x.w")
        self.params["embed.x.b"] = Tensor(self.params["embed.rgb.b"].data.copy(), name="embed.x.b")
        groups = []
        if c.cma:
            groups += [(f"cma.{l}.", c.adapter_bottleneck) for l in range(1, c.depth + 1)]
        if c.mfa:
            groups += [(f"mfa.{i}.", c.fusion_width) for i in range(1, c.stages + 1)]
        for prefix, width in groups:
            for where in ("attn", "mlp"):
                p = f"{prefix}{where}."
                self._new(p + "down.w", (c.dim, width), std=adapter_std, rng=rng)
                self._new(p + "down.b", (width,))
                self._new(p + "up.w", (width, c.dim))
                self._new(p + "up.b", (c.dim,))
        self.set_stage("adapt")

    @property
    def adapted(self) -> bool:
        return "embed.x.w" in self.params

    # -- parameter groups

    def group_of(self, name: str) -> str:
        if name.startswith(("cma.", "mfa.")):
            return "adapters"
        if name.startswith("embed.x."):
            return "patch_embed_x"
        if name.startswith("head_norm."):
            return "head_norm"
        if name.startswith("head."):
            return "head"
        return "backbone"

    def set_stage(self, stage: str) -> None:
        """Flag trainable tensors.

        ``pretrain``: RGB embed, blocks, head. ``adapt``: adapters, X embed and
        the pre-head LayerNorm. ``frozen``: X embed and pre-head LayerNorm only.
        ``full``: everything.
        """
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        train = {
            "pretrain": {"backbone", "head"},
            "adapt": {"adapters", "patch_embed_x", "head_norm"},
            "frozen": {"patch_embed_x", "head_norm"},
            "full": {"backbone", "head", "adapters", "patch_embed_x", "head_norm"},
        }[stage]
        for name, t in self.params.items():
            t.requires_grad = self.group_of(name) in train
            t.grad = None
        self.stage = stage

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in sorted(self.params.items()) if v.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "SymTracker":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        other = copy.copy(self)
        other.dtype = np.dtype(dtype)
        other.params = Params()
        for k, v in self.params.items():
            t = Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
            other.params[k] = t
        other.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        stage = self.stage
        self.params = Params()
        self.buffers = {}
        for k, v in arrays.items():
            kind, name = k.split("/", 1)
            if kind == "param":
                self.params[name] = Tensor(np.array(v, copy=True), name=name)
            else:
                self.buffers[name] = np.array(v, copy=True)
        self.dtype = next(iter(self.params.values())).dtype
        self.set_stage(stage)

    # -- forward pieces

    def block(self, l: int) -> Params:
        return self.params.sub(f"blocks.{l}.")

    def cma_adapters(self, l: int) -> Optional[Params]:
        return self.params.sub(f"cma.{l}.") if self.cfg.cma else None

    def mfa_adapters(self, i: int) -> Optional[Params]:
        return self.params.sub(f"mfa.{i}.") if self.cfg.mfa else None

    def embed(self, template, search, stream: str = "rgb") -> Tensor:
        """Token embeddings [B, N_z+N_x, D] for one modality."""
        w, b = self.params[f"embed.{stream}.w"], self.params[f"embed.{stream}.b"]
        z = patch_embed(template, w, b, self.params["pos.z"], self.cfg.patch)
        x = patch_embed(search, w, b, self.params["pos.x"], self.cfg.patch)
        return T.concat([z, x], axis=-2)

    def backbone_forward(self, e_rgb: Tensor, e_x: Tensor, probe: Optional[list] = None
                         ) -> tuple[TokenState, list[Tensor]]:
        c = self.cfg
        state = TokenState(e_rgb, e_x, c.template_tokens, c.search_tokens)
        feats = []
        stage = 0
        for l in range(1, c.depth + 1):
            blk = self.block(l)
            h_rgb = vit_block_rgb(state.h_rgb, blk, c)
            if c.cma:
                h_x = vit_block_cma(state.h_x, blk, self.cma_adapters(l), c, c.r)
            else:
                h_x = vit_block_rgb(state.h_x, blk, c)
            state = TokenState(h_rgb, h_x, state.n_z, state.n_x)
            if l in c.fusion_layers:
                stage += 1
                state, fused = fusion_stage(state, blk, self.mfa_adapters(stage), c, c.r, probe)
                feats.append(fused)
        return state, feats

    def rgb_forward(self, e_rgb: Tensor) -> TokenState:
        c = self.cfg
        h = e_rgb
        for l in range(1, c.depth + 1):
            h = vit_block_rgb(h, self.block(l), c)
        return TokenState(h, None, c.template_tokens, c.search_tokens)

    def _bn(self, x: Tensor, p: str) -> Tensor:
        g, b = self.params[p + "g"], self.params[p + "b"]
        if self.training:
            xhat = T.standardize(x, (0, 1, 2), self.cfg.bn_eps)
            mom = self.cfg.bn_momentum
            n = x.size // x.shape[-1]
            mu = x.data.mean(axis=(0, 1, 2))
            var = x.data.var(axis=(0, 1, 2)) * (n / max(n - 1, 1))
            self.buffers[p + "mean"] = ((1 - mom) * self.buffers[p + "mean"] + mom * mu).astype(self.dtype)
            self.buffers[p + "var"] = ((1 - mom) * self.buffers[p + "var"] + mom * var).astype(self.dtype)
        else:
            inv = 1.0 / np.sqrt(self.buffers[p + "var"] + self.cfg.bn_eps)
            xhat = (x - Tensor(self.buffers[p + "mean"])) * Tensor(inv.astype(self.dtype))
        return xhat * g + b

    def head_forward(self, state: TokenState) -> HeadOutput:
        c = self.cfg
        span = state.search_span
        feat = state.h_rgb[:, span, :]
        if state.h_x is not None:
            feat = feat + state.h_x[:, span, :]
        feat = T.layer_norm(feat, self.params["head_norm.g"], self.params["head_norm.b"], c.ln_eps)
        S = c.grid
        if feat.shape[1] != S * S:
            raise ShapeError(f"search tokens {feat.shape[1]} do not form a square grid")
        grid = feat.reshape(feat.shape[0], S, S, c.dim)
        outs = {}
        for br in BRANCHES:
            h = grid
            for j in range(c.head_layers):
                p = f"head.{br}.{j}."
                h = T.conv2d(h, self.params[p + "conv.w"], self.params[p + "conv.b"])
                h = T.relu(self._bn(h, p + "bn."))
            outs[br] = linear(h, self.params, f"head.{br}.out")
        score = outs["ctr"].reshape(outs["ctr"].shape[:3])
        offset = outs["offset"].transpose(0, 3, 1, 2)
        size = T.sigmoid(outs["size"]).transpose(0, 3, 1, 2)
        return HeadOutput(score, offset, size)

    def forward(self, z_rgb, z_x, x_rgb, x_x, mask_rgb=None, mask_x=None,
                probe: Optional[list] = None) -> tuple[HeadOutput, list[Tensor]]:
        """Clean path when masks are None; masked path otherwise."""
        e_rgb, e_x = self.embed(z_rgb, x_rgb, "rgb"), self.embed(z_x, x_x, "x")
        return self.forward_embeds(e_rgb, e_x, mask_rgb, mask_x, probe)

    def forward_embeds(self, e_rgb: Tensor, e_x: Tensor, mask_rgb=None, mask_x=None,
                       probe: Optional[list] = None) -> tuple[HeadOutput, list[Tensor]]:
        if mask_rgb is not None:
            e_rgb = T.apply_row_mask(e_rgb, mask_rgb)
        if mask_x is not None:
            e_x = T.apply_row_mask(e_x, mask_x)
        state, feats = self.backbone_forward(e_rgb, e_x, probe)
        return self.head_forward(state), feats

    def forward_rgb(self, z_rgb, x_rgb) -> HeadOutput:
        """Single-modality tracker used during pretraining."""
        return self.head_forward(self.rgb_forward(self.embed(z_rgb, x_rgb, "rgb")))


# ---------------------------------------------------------------- decoding

def decode_box(score, offset, size) -> tuple[np.ndarray, np.ndarray]:
    """Boxes (cx, cy, w, h) in search-crop units and sigmoid confidences.

    ``score`` is [B,S,S] (or [S,S]), ``offset``/``size`` are [B,2,S,S]. The
    argmax takes the first maximum in row-major order.
    """
    s = np.asarray(score.data if isinstance(score, Tensor) else score, dtype=np.float64)
    off = np.asarray(offset.data if isinstance(offset, Tensor) else offset, dtype=np.float64)
    sz = np.asarray(size.data if isinstance(size, Tensor) else size, dtype=np.float64)
    single = s.ndim == 2
    if single:
        s, off, sz = s[None], off[None], sz[None]
    B, S, _ = s.shape
    flat = s.reshape(B, -1)
    idx = flat.argmax(axis=1)
    row, col = np.divmod(idx, S)
    b = np.arange(B)
    cx = (col + off[b, 0, row, col]) / S
    cy = (row + off[b, 1, row, col]) / S
    boxes = np.stack([cx, cy, sz[b, 0, row, col], sz[b, 1, row, col]], axis=1)
    conf = 1.0 / (1.0 + np.exp(-flat[b, idx]))
    if single:
        return boxes[0], conf[0]
    return boxes, conf
