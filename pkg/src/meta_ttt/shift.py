"""Stochastic per-channel domain-shift synthesis.

During source training a fresh random per-channel affine transform is applied
to the features right after the stem: a Bernoulli mask picks which channels
shift, and masked channels get scale and offset drawn uniformly from [0, 1].
Unmasked channels pass through unchanged (scale 1, offset 0). The layer is an
exact identity at test time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass
class ShiftDraw:
    mask: np.ndarray  # binary [c]
    gamma_shift: np.ndarray  # [c], 1 where unmasked
    lambda_shift: np.ndarray  # [c], 0 where unmasked
    p: float


def sample_mask(p: float, c: int, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0,1]")
    if c < 1:
        raise ValueError("c must be >= 1")
    return (rng.random(c) < p).astype(np.int64)


def sample_transform(
    mask: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform [0,1] scale/offset on masked channels, identity elsewhere."""
    c = mask.shape[0]
    gamma = np.where(mask == 1, rng.random(c), 1.0)
    lam = np.where(mask == 1, rng.random(c), 0.0)
    return gamma, lam


def sample_shift(p: float, c: int, rng: np.random.Generator) -> ShiftDraw:
    mask = sample_mask(p, c, rng)
    gamma, lam = sample_transform(mask, rng)
    return ShiftDraw(mask=mask, gamma_shift=gamma, lambda_shift=lam, p=p)


def apply_shift(z: torch.Tensor, draw: ShiftDraw) -> torch.Tensor:
    if z.shape[1] != draw.mask.shape[0]:
        raise ValueError(
            f"channel mismatch: draw has {draw.mask.shape[0]}, input has {z.shape[1]}"
        )
    if not draw.mask.any():
        return z  # bit-exact identity
    gamma = torch.as_tensor(draw.gamma_shift, dtype=z.dtype, device=z.device)
    lam = torch.as_tensor(draw.lambda_shift, dtype=z.dtype, device=z.device)
    return z * gamma.view(1, -1, 1, 1) + lam.view(1, -1, 1, 1)


class DomainShiftLayer(nn.Module):
    """Applies the current draw when active; identity otherwise.

    The training loop calls ``resample`` once per minibatch so every batch
    sees one coherent synthetic domain. Draws are not trainable.
    """

    def __init__(self, num_features: int, p: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.p = p
        self.active = False
        self._draw: ShiftDraw | None = None

    def resample(self, rng: np.random.Generator) -> ShiftDraw:
        self._draw = sample_shift(self.p, self.num_features, rng)
        return self._draw

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if not self.active or self._draw is None:
            return z
        return apply_shift(z, self._draw)
