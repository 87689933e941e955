"""Random complementary patch masks over paired token sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, apply_row_mask


@dataclass(frozen=True)
class MaskPlan:
    mask_rgb: np.ndarray
    mask_x: np.ndarray
    rho_primary: float
    rho_secondary: float
    primary: str
    seed: Optional[int] = None

    def __post_init__(self):
        if self.mask_rgb.shape != self.mask_x.shape:
            raise ValueError("mask shapes differ")
        if np.any(self.mask_rgb & self.mask_x):
            raise AssertionError("masks overlap; complementarity violated")

    @property
    def n_tokens(self) -> int:
        return self.mask_rgb.shape[-1]


def mask_counts(n: int, rho_primary: float, rho_secondary: float) -> tuple[int, int]:
    k1 = int(np.floor(rho_primary * n))
    return k1, int(np.floor(rho_secondary * (n - k1)))


def draw_rcpm(n_tokens: int, rho_primary: float, rho_secondary: float,
              rng: np.random.Generator, seed: Optional[int] = None) -> MaskPlan:
    """Mask a random share of one modality, then a share of the other drawn only
    from the positions the first left intact.

    The primary modality is picked by a fair coin.
    """
    for rho in (rho_primary, rho_secondary):
        if not 0 <= rho < 1:
            raise ValueError(f"mask ratio {rho} outside [0, 1)")
    k1, k2 = mask_counts(n_tokens, rho_primary, rho_secondary)
    rgb_first = bool(rng.integers(2) == 0)
    order = rng.permutation(n_tokens)
    first = np.zeros(n_tokens, dtype=bool)
    first[order[:k1]] = True
    rest = order[k1:]
    second = np.zeros(n_tokens, dtype=bool)
    second[rng.choice(rest, size=k2, replace=False)] = True
    if rgb_first:
        return MaskPlan(first, second, rho_primary, rho_secondary, "rgb", seed)
    return MaskPlan(second, first, rho_primary, rho_secondary, "x", seed)


def draw_batch(batch: int, n_tokens: int, rho_primary: float, rho_secondary: float,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stacked [B, N] masks for rgb and x, one independent plan per sample."""
    plans = [draw_rcpm(n_tokens, rho_primary, rho_secondary, rng) for _ in range(batch)]
    return np.stack([p.mask_rgb for p in plans]), np.stack([p.mask_x for p in plans])


def apply_mask(embeds: Tensor, mask) -> Tensor:
    return apply_row_mask(embeds, mask)
