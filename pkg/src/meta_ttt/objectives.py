"""Self-supervised test-time objective.

Each batch is split by prediction confidence: confident samples get argmax
pseudo-labels and a soft cross-entropy term, the rest feed a mean-entropy
term. The shift parameters at selected layers descend (pseudo - lam*entropy),
so they climb the entropy surface, while the remaining adaptable parameters
descend (pseudo + lam*entropy) — an adversarial pair balanced by lam.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

EntropyFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class ConfidenceSplit:
    """Partition of a batch into pseudo-labeled and low-confidence samples."""

    conf_indices: torch.Tensor  # long [m_conf]
    conf_labels: torch.Tensor  # long [m_conf]
    lowconf_indices: torch.Tensor  # long [m_low]
    kappa: float

    @property
    def is_empty(self) -> bool:
        return self.conf_indices.numel() == 0 and self.lowconf_indices.numel() == 0


@dataclass
class MinimaxLosses:
    l_pseudo: torch.Tensor
    h_mean: torch.Tensor  # mean entropy over the low-confidence samples
    lam: float
    beta_loss: torch.Tensor  # minimized by the entropy-maximizing shift params
    gamma_loss: torch.Tensor  # minimized by the remaining adaptable params


def mean_entropy(logits: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy (nats) of the softmax distributions in ``logits``."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if logits.shape[0] == 0:
        return logits.new_zeros(())
    logp = F.log_softmax(logits, dim=1)
    return -(logp.exp() * logp).sum(dim=1).mean()


# registry so alternative entropy functionals (e.g. generalized variants) can
# be plugged in by name without touching the training loops
ENTROPY_REGISTRY: dict[str, EntropyFn] = {"shannon": mean_entropy}


def register_entropy(name: str, fn: EntropyFn) -> None:
    ENTROPY_REGISTRY[name] = fn


def confidence_split(logits: torch.Tensor, kappa: float) -> ConfidenceSplit:
    """Split samples by whether their max softmax probability reaches kappa.

    Argmax ties resolve to the lowest class index.
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"kappa must be in (0,1), got {kappa}")
    probs = F.softmax(logits.detach(), dim=1)
    max_prob, labels = probs.max(dim=1)  # torch.max returns the first maximum
    confident = max_prob >= kappa
    idx = torch.arange(logits.shape[0], device=logits.device)
    return ConfidenceSplit(
        conf_indices=idx[confident],
        conf_labels=labels[confident],
        lowconf_indices=idx[~confident],
        kappa=kappa,
    )


def pseudo_label_loss(logits: torch.Tensor, split: ConfidenceSplit) -> torch.Tensor:
    """Soft cross-entropy against the pseudo-labels; 0 when none are confident."""
    if split.conf_indices.numel() == 0:
        return logits.new_zeros(())
    sel = logits[split.conf_indices]
    return F.cross_entropy(sel, split.conf_labels)


def minimax_objectives(
    logits: torch.Tensor,
    split: ConfidenceSplit,
    lam: float,
    entropy_fn: EntropyFn = mean_entropy,
) -> MinimaxLosses:
    """The adversarial loss pair; entropy is taken on low-confidence samples only."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    l_pseudo = pseudo_label_loss(logits, split)
    h_mean = entropy_fn(logits[split.lowconf_indices])
    beta_loss = l_pseudo - lam * h_mean
    gamma_loss = l_pseudo + lam * h_mean
    return MinimaxLosses(
        l_pseudo=l_pseudo, h_mean=h_mean, lam=lam, beta_loss=beta_loss, gamma_loss=gamma_loss
    )
