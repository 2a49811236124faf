"""Interpolated batch normalization.

The layer keeps a frozen snapshot of source running statistics and, at
adaptation time, normalizes with a per-channel convex combination of those
source statistics and the live batch statistics. The interpolation weight is
a learnable per-channel parameter constrained to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

EPS_DEFAULT = 1e-5
MOMENTUM_DEFAULT = 0.1

# statistics sources the layer can normalize with
STATS_MODES = ("mixed", "source", "batch")


class DegenerateBatchError(ValueError):
    pass


class PhaseError(RuntimeError):
    """Raised when a source-training-only operation runs during adaptation."""


@dataclass
class BatchStats:
    """Per-channel first and second moments of one minibatch."""

    mu_t: torch.Tensor
    var_t: torch.Tensor  # biased estimator
    count: int


def batch_stats(z: torch.Tensor) -> BatchStats:
    """Per-channel mean and biased variance over all non-channel axes."""
    if z.ndim != 4:
        raise ValueError(f"expected [n,c,u,v] tensor, got shape {tuple(z.shape)}")
    n, _, u, v = z.shape
    if n == 0:
        raise DegenerateBatchError("degenerate batch: n = 0")
    count = n * u * v
    mu = z.mean(dim=(0, 2, 3))
    var = z.var(dim=(0, 2, 3), unbiased=False)
    return BatchStats(mu_t=mu, var_t=var, count=count)


def mixed_stats(
    mu_s: torch.Tensor,
    var_s: torch.Tensor,
    mu_t: torch.Tensor,
    var_t: torch.Tensor,
    alpha: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Interpolate source and batch statistics with weight ``alpha``.

    The variance carries the cross term a(1-a)(mu_t - mu_s)^2 so that the
    result equals the pooled statistics of the two underlying populations
    when alpha is the target's sample fraction.
    """
    if bool((alpha < 0).any()) or bool((alpha > 1).any()):
        raise ValueError("alpha must lie in [0, 1] componentwise")
    mu = alpha * mu_t + (1.0 - alpha) * mu_s
    var = alpha * var_t + (1.0 - alpha) * var_s + alpha * (1.0 - alpha) * (mu_t - mu_s) ** 2
    return mu, var


def normalize(
    z: torch.Tensor,
    mu: torch.Tensor,
    var: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = EPS_DEFAULT,
) -> torch.Tensor:
    """gamma * (z - mu) / sqrt(var + eps) + beta, broadcast per channel."""
    shape = (1, -1, 1, 1)
    mu = mu.view(shape)
    var = var.view(shape)
    return gamma.view(shape) * (z - mu) / torch.sqrt(var + eps) + beta.view(shape)


def project_alpha(alpha_raw: torch.Tensor) -> torch.Tensor:
    """Clamp the interpolation weight back into [0, 1]."""
    return alpha_raw.clamp(0.0, 1.0)


class MixedBatchNorm2d(nn.Module):
    """BN layer whose statistics interpolate frozen source and live batch stats.

    ``stats_mode`` selects the statistics used for normalization:
      - "mixed":  alpha-weighted blend (training and the full method's TTA)
      - "source": frozen source running stats (plain inference)
      - "batch":  pure batch stats (AdaBN/Tent baselines, alpha forced to 1)

    ``track_source_stats`` controls the running-stat EMA and may only be on
    during source training; it must be frozen before deployment.
    """

    def __init__(
        self,
        num_features: int,
        eps: float = EPS_DEFAULT,
        momentum: float = MOMENTUM_DEFAULT,
        alpha_init: float = 0.75,
    ):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))  # gamma
        self.bias = nn.Parameter(torch.zeros(num_features))  # beta
        self.alpha = nn.Parameter(torch.full((num_features,), float(alpha_init)))
        self.register_buffer("source_mean", torch.zeros(num_features))
        self.register_buffer("source_var", torch.ones(num_features))
        self.stats_mode = "mixed"
        self.track_source_stats = False

    def extra_repr(self) -> str:
        return f"{self.num_features}, stats_mode={self.stats_mode}"

    def set_stats_mode(self, mode: str) -> None:
        if mode not in STATS_MODES:
            raise ValueError(f"unknown stats mode {mode!r}")
        self.stats_mode = mode

    def update_running_stats(self, stats: BatchStats) -> None:
        """EMA update of the frozen source statistics; source training only."""
        if not self.track_source_stats:
            raise PhaseError("running statistics are frozen outside source training")
        with torch.no_grad():
            m = self.momentum
            self.source_mean.mul_(1.0 - m).add_(stats.mu_t.detach(), alpha=m)
            self.source_var.mul_(1.0 - m).add_(stats.var_t.detach(), alpha=m)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.num_features:
            raise ValueError(
                f"channel mismatch: layer has {self.num_features}, input has {z.shape[1]}"
            )
        if self.stats_mode == "source":
            mu, var = self.source_mean, self.source_var
        else:
            stats = batch_stats(z)
            if self.track_source_stats:
                self.update_running_stats(stats)
            if self.stats_mode == "batch":
                mu, var = stats.mu_t, stats.var_t
            else:
                alpha = project_alpha(self.alpha)
                mu, var = mixed_stats(
                    self.source_mean, self.source_var, stats.mu_t, stats.var_t, alpha
                )
        return normalize(z, mu, var, self.weight, self.bias, self.eps)
