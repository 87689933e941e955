"""Configuration dataclasses and strict JSON loading."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

from pydantic import ConfigDict, TypeAdapter, ValidationError, with_config

_STRICT = ConfigDict(extra="forbid")


class ConfigError(ValueError):
    """Invalid or unparseable configuration."""


@with_config(_STRICT)
@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 16
    in_chans: int = 3
    template_size: int = 64
    search_size: int = 128
    # 1-indexed blocks reused as fusion stages
    fusion_layers: tuple[int, ...] = (2, 4)
    adapter_bottleneck: int = 8
    # width of the fusion-stage adapters; None means adapter_bottleneck
    fusion_bottleneck: Optional[int] = None
    r: float = 1.0
    cma: bool = True
    mfa: bool = True
    head_layers: int = 2
    head_channels: int = 16
    ln_eps: float = 1e-6
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        fl = tuple(self.fusion_layers)
        object.__setattr__(self, "fusion_layers", fl)
        if self.depth < 1 or self.dim < 1 or self.heads < 1:
            raise ConfigError("depth, dim and heads must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if any(not 1 <= l <= self.depth for l in fl) or any(a >= b for a, b in zip(fl, fl[1:])):
            raise ConfigError(f"fusion_layers {fl} must be strictly increasing within [1, {self.depth}]")
        if not 0 < self.adapter_bottleneck < self.dim:
            raise ConfigError("adapter_bottleneck must lie in (0, dim)")
        if self.fusion_bottleneck is not None and not 0 < self.fusion_bottleneck:
            raise ConfigError("fusion_bottleneck must be positive")
        for name in ("template_size", "search_size"):
            if getattr(self, name) % self.patch:
                raise ConfigError(f"{name} {getattr(self, name)} is not divisible by patch {self.patch}")
        if math.isqrt(self.search_tokens) ** 2 != self.search_tokens:
            raise ConfigError("search token count must be a perfect square")
        if self.head_layers < 1 or self.head_channels < 1:
            raise ConfigError("head needs at least one layer and channel")

    @property
    def template_tokens(self) -> int:
        return (self.template_size // self.patch) ** 2

    @property
    def search_tokens(self) -> int:
        return (self.search_size // self.patch) ** 2

    @property
    def n_tokens(self) -> int:
        return self.template_tokens + self.search_tokens

    @property
    def grid(self) -> int:
        return math.isqrt(self.search_tokens)

    @property
    def stages(self) -> int:
        return len(self.fusion_layers)

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def fusion_width(self) -> int:
        return self.fusion_bottleneck or self.adapter_bottleneck

    @property
    def head_widths(self) -> list[int]:
        """Channel widths through one head branch: input, then each conv layer."""
        return [self.dim] + [max(1, self.head_channels >> i) for i in range(self.head_layers)]

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_chans

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        base = dict(depth=2, dim=8, heads=2, patch=4, template_size=8, search_size=8,
                    fusion_layers=(2,), adapter_bottleneck=2, head_layers=2, head_channels=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(depth=12, dim=768, heads=12, patch=16, template_size=128, search_size=256,
                    fusion_layers=(3, 6, 9, 11), adapter_bottleneck=192, head_layers=4,
                    head_channels=256)
        base.update(kw)
        return cls(**base)


@with_config(_STRICT)
@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    alpha: float = 0.3
    beta: float = 0.25
    focal_pos: float = 2.0
    focal_neg: float = 4.0
    heatmap_sigma: float = 1.0
    # False lets the self-distillation term pull the clean path as well
    detach_teacher: bool = True

    def __post_init__(self):
        for k in ("lambda_iou", "lambda_l1", "alpha", "beta", "focal_pos", "focal_neg"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if self.heatmap_sigma <= 0:
            raise ConfigError("heatmap_sigma must be positive")


@with_config(_STRICT)
@dataclass(frozen=True)
class MaskConfig:
    rho_primary: float = 0.5
    rho_secondary: float = 0.5

    def __post_init__(self):
        for k in ("rho_primary", "rho_secondary"):
            if not 0 <= getattr(self, k) < 1:
                raise ConfigError(f"{k} must lie in [0, 1)")


@with_config(_STRICT)
@dataclass(frozen=True)
class SequenceSpec:
    length: int = 40
    image_size: int = 128
    radius_min: float = 7.0
    radius_max: float = 11.0
    motion_sigma: float = 2.0
    n_distractors: int = 3
    # fraction of frames where the target shows in only one modality
    comp_fraction: float = 0.3
    comp_window: int = 5
    noise_sigma: float = 0.05
    low_contrast: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.length < 1 or self.image_size < 8:
            raise ConfigError("length and image_size must be positive")
        if not 0 < self.radius_min <= self.radius_max < self.image_size / 4:
            raise ConfigError("radius range must satisfy 0 < min <= max < image_size/4")
        if self.motion_sigma < 0 or self.noise_sigma <= 0 or self.n_distractors < 0:
            raise ConfigError("motion_sigma, noise_sigma and n_distractors out of range")
        if not 0 <= self.comp_fraction <= 1 or self.comp_window < 1:
            raise ConfigError("comp_fraction must lie in [0,1] and comp_window >= 1")
        if not 0 <= self.low_contrast < self.noise_sigma:
            raise ConfigError("low_contrast must stay below noise_sigma")
        if self.n_complementary > self.length - self.comp_window:
            raise ConfigError("complementary frames do not fit after the first window")

    @property
    def n_complementary(self) -> int:
        return int(round(self.comp_fraction * self.length))


@with_config(_STRICT)
@dataclass(frozen=True)
class Perturbation:
    kind: Literal["none", "drop_rgb", "drop_x", "occlude"] = "none"
    probability: float = 0.5
    n_rects: int = 2
    rect_min: float = 0.2
    rect_max: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.probability <= 1:
            raise ConfigError("probability must lie in [0, 1]")
        if not 0 < self.rect_min <= self.rect_max <= 1:
            raise ConfigError("rect sizes must satisfy 0 < rect_min <= rect_max <= 1")

    @property
    def label(self) -> str:
        return "clean" if self.kind == "none" else self.kind


@with_config(_STRICT)
@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epoch_samples: int = 2000
    pretrain_epochs: int = 12
    adapt_epochs: int = 6
    lr_pretrain: float = 1e-3
    lr_adapt: float = 3e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine: bool = False
    n_sequences: int = 64
    center_jitter: float = 0.25
    scale_jitter: float = 0.1
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epoch_samples < 1 or self.n_sequences < 1:
            raise ConfigError("batch_size, epoch_samples and n_sequences must be positive")
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.epoch_samples // self.batch_size)


@with_config(_STRICT)
@dataclass(frozen=True)
class EvalConfig:
    n_sequences: int = 16
    seed_offset: int = 10_000
    conditions: tuple[Perturbation, ...] = (
        Perturbation(kind="none", probability=0.0),
        Perturbation(kind="drop_rgb", probability=0.5),
        Perturbation(kind="drop_x", probability=0.5),
        Perturbation(kind="occlude", probability=0.5),
    )
    image_px: int = 128


@with_config(_STRICT)
@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SequenceSpec = field(default_factory=SequenceSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    mask: MaskConfig = field(default_factory=MaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    # census layout for the param-census command; None derives it from model flags
    census_mode: Optional[Literal["frozen", "cma", "mfa", "cma+mfa"]] = None

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


_RUN = TypeAdapter(RunConfig)
_MODEL = TypeAdapter(ModelConfig)


def to_dict(cfg) -> dict:
    return TypeAdapter(type(cfg)).dump_python(cfg, mode="json")


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def parse_run_config(obj: dict) -> RunConfig:
    try:
        return _RUN.validate_python(obj)
    except ValidationError as exc:
        raise ConfigError(_short(exc)) from None
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_model_config(obj: dict) -> ModelConfig:
    try:
        return _MODEL.validate_python(obj)
    except ValidationError as exc:
        raise ConfigError(_short(exc)) from None


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_run_config(obj)


def run_config_schema() -> dict:
    return _RUN.json_schema()


def _short(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)
