"""Analytic parameter counts by group, without allocating a model."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .config import ModelConfig
from .model import BRANCH_OUT

MODES = ("frozen", "cma", "mfa", "cma+mfa")


@dataclass
class Census:
    mode: str
    groups: dict
    tuned_groups: tuple

    @property
    def total_params(self) -> int:
        return sum(self.groups.values())

    @property
    def tuned_params(self) -> int:
        return sum(self.groups[g] for g in self.tuned_groups)

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "total_params": self.total_params,
            "tuned_params": self.tuned_params,
            "total_params_M": round(self.total_params / 1e6, 2),
            "tuned_params_M": round(self.tuned_params / 1e6, 2),
            "groups": dict(self.groups),
            "tuned_groups": list(self.tuned_groups),
        }


def adapter_params(dim: int, width: int) -> int:
    return dim * width + width + width * dim + dim


def block_params(dim: int, hidden: int) -> int:
    ln = 2 * dim
    attn = dim * 3 * dim + 3 * dim + dim * dim + dim
    mlp = dim * hidden + hidden + hidden * dim + dim
    return 2 * ln + attn + mlp


def head_params(cfg: ModelConfig) -> int:
    w = cfg.head_widths
    convs = sum(9 * w[j] * w[j + 1] + w[j + 1] + 2 * w[j + 1] for j in range(cfg.head_layers))
    return sum(convs + w[-1] * k + k for k in BRANCH_OUT.values())


def mode_of(cfg: ModelConfig) -> str:
    if cfg.cma and cfg.mfa:
        return "cma+mfa"
    return "cma" if cfg.cma else "mfa" if cfg.mfa else "frozen"


def param_census(cfg: ModelConfig, mode: str | None = None) -> Census:
    """Exact parameter counts for ``cfg`` under an adaptation layout.

    ``mode`` overrides the model's own cma/mfa flags. Tuned parameters are the
    adapters, the X-stream patch embedding and the LayerNorm before the head.
    """
    mode = mode or mode_of(cfg)
    if mode not in MODES:
        raise ValueError(f"unknown census mode {mode!r}")
    cfg = replace(cfg, cma="cma" in mode, mfa="mfa" in mode)
    D = cfg.dim
    embed = cfg.patch_dim * D + D
    backbone = embed + cfg.n_tokens * D + cfg.depth * block_params(D, cfg.mlp_hidden)
    n_cma = 2 * cfg.depth if cfg.cma else 0
    n_mfa = 2 * cfg.stages if cfg.mfa else 0
    groups = {
        "backbone": backbone,
        "patch_embed_x": embed,
        "adapters": n_cma * adapter_params(D, cfg.adapter_bottleneck)
        + n_mfa * adapter_params(D, cfg.fusion_width),
        "head_norm": 2 * D,
        "head": head_params(cfg),
    }
    return Census(mode, groups, ("adapters", "patch_embed_x", "head_norm"))
