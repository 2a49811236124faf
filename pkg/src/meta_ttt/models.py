"""Desk-scale backbones built around the interpolated BN layer."""
from __future__ import annotations

import torch
import torch.nn as nn

from .mixed_bn import MixedBatchNorm2d
from .shift import DomainShiftLayer


class DigitCNN(nn.Module):
    """Small convnet for 28x28 grayscale inputs.

    stem -> shift-synthesis hook -> two strided conv blocks -> linear head.
    All normalization layers are MixedBatchNorm2d so the whole network is
    adaptable at test time through its BN parameters.
    """

    def __init__(self, num_classes: int = 10, alpha_init: float = 0.75, shift_p: float = 0.1):
        super().__init__()
        self.stem_conv = nn.Conv2d(1, 8, 3, padding=1, bias=False)
        self.stem_bn = MixedBatchNorm2d(8, alpha_init=alpha_init)
        self.shift_layer = DomainShiftLayer(8, p=shift_p)
        self.conv1 = nn.Conv2d(8, 16, 3, stride=2, padding=1, bias=False)
        self.bn1 = MixedBatchNorm2d(16, alpha_init=alpha_init)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1, bias=False)
        self.bn2 = MixedBatchNorm2d(32, alpha_init=alpha_init)
        self.act = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(32, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.act(self.stem_bn(self.stem_conv(x)))
        z = self.shift_layer(z)
        z = self.act(self.bn1(self.conv1(z)))
        z = self.act(self.bn2(self.conv2(z)))
        z = self.pool(z).flatten(1)
        return self.classifier(z)


class ToyNet(nn.Module):
    """Tiny (<100 parameter) network for gradient-checking the meta step."""

    def __init__(self, in_features: int = 4, hidden: int = 3, num_classes: int = 3,
                 alpha_init: float = 0.75):
        super().__init__()
        self.encoder = nn.Linear(in_features, hidden)
        self.bn = MixedBatchNorm2d(hidden, alpha_init=alpha_init)
        self.classifier = nn.Linear(hidden, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encoder(x)
        z = self.bn(z.view(*z.shape, 1, 1)).flatten(1)
        return self.classifier(torch.tanh(z))


def mixed_bn_modules(model: nn.Module) -> list[tuple[str, MixedBatchNorm2d]]:
    """Named MixedBatchNorm2d modules in definition order."""
    return [(n, m) for n, m in model.named_modules() if isinstance(m, MixedBatchNorm2d)]


def set_stats_mode(model: nn.Module, mode: str) -> None:
    for _, m in mixed_bn_modules(model):
        m.set_stats_mode(mode)


def set_source_stat_tracking(model: nn.Module, on: bool) -> None:
    for _, m in mixed_bn_modules(model):
        m.track_source_stats = on


def alpha_summary(model: nn.Module) -> dict[str, tuple[float, float, float]]:
    """Per-layer (mean, min, max) of the projected interpolation weights."""
    out = {}
    for name, m in mixed_bn_modules(model):
        a = m.alpha.detach().clamp(0.0, 1.0)
        out[name] = (float(a.mean()), float(a.min()), float(a.max()))
    return out
