"""Episodic meta-training loop.

Source training runs in two stages. A plain ERM warm-up stands in for the
pre-trained backbone. The meta stage then alternates, per minibatch drawn
from a synthesized domain:

  meta-train: the self-supervised minimax update of the adaptable BN
      parameters — shift params at selected layers step against
      (pseudo - lam*entropy), the rest against (pseudo + lam*entropy);
  meta-test:  a supervised cross-entropy step whose gradient flows through
      the recorded inner updates back to the pre-step parameters
      (second-order by default, with a first-order fallback).

The same inner-update machinery drives test-time adaptation (see tta.py).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .config import AdaptationConfig, ConfigError
from .mixed_bn import MixedBatchNorm2d
from .models import (
    alpha_summary,
    mixed_bn_modules,
    set_source_stat_tracking,
    set_stats_mode,
)
from .objectives import (
    ENTROPY_REGISTRY,
    ConfidenceSplit,
    MinimaxLosses,
    confidence_split,
    minimax_objectives,
)

logger = logging.getLogger(__name__)


class EngineError(RuntimeError):
    pass


@dataclass
class ParamPartition:
    """Disjoint split of parameter names: adversarial shift params, the
    remaining adaptable BN params, and the frozen rest of the network."""

    theta_beta: list[str]
    theta_gamma: list[str]
    theta_frozen: list[str]

    @property
    def adaptable(self) -> list[str]:
        return self.theta_beta + self.theta_gamma


def partition_parameters(model: nn.Module, layer_selector: str) -> ParamPartition:
    bn_layers = mixed_bn_modules(model)
    if not bn_layers:
        raise ConfigError("model contains no MixedBatchNorm2d layer")
    names = [n for n, _ in bn_layers]
    if layer_selector == "last":
        selected = [names[-1]]
    elif layer_selector == "all":
        selected = list(names)
    elif layer_selector == "none":
        selected = []
    else:
        selected = [s.strip() for s in layer_selector.split(",") if s.strip()]
        unknown = [s for s in selected if s not in names]
        if unknown:
            raise ConfigError(f"layer selector matched no mixed-BN layer: {unknown}")
    theta_beta = [f"{n}.bias" for n in selected]
    theta_gamma = [f"{n}.weight" for n in names] + [f"{n}.alpha" for n in names]
    theta_gamma += [f"{n}.bias" for n in names if n not in selected]
    adaptable = set(theta_beta) | set(theta_gamma)
    theta_frozen = [n for n, _ in model.named_parameters() if n not in adaptable]
    return ParamPartition(theta_beta=theta_beta, theta_gamma=theta_gamma, theta_frozen=theta_frozen)


def _is_alpha(name: str) -> bool:
    return name.endswith(".alpha")


def _inner_lr(name: str, cfg: AdaptationConfig) -> float:
    # alpha_lr is the meta-test rate: the interpolation weight is learned in
    # the outer supervised step, so the inner SSL step moves it gently
    return cfg.lr


@dataclass
class SgdState:
    """Momentum buffers for the hand-rolled Nesterov SGD steps.

    The step function is written so it stays differentiable when the inputs
    carry grad history, which is what the second-order outer gradient needs.
    """

    buffers: dict[str, torch.Tensor] = field(default_factory=dict)

    def step(
        self,
        name: str,
        param: torch.Tensor,
        grad: torch.Tensor,
        lr: float,
        momentum: float,
        weight_decay: float = 0.0,
        nesterov: bool = True,
    ) -> torch.Tensor:
        if weight_decay:
            grad = grad + weight_decay * param
        if momentum:
            buf = self.buffers.get(name)
            buf = grad if buf is None else momentum * buf + grad
            self.buffers[name] = buf
            d = grad + momentum * buf if nesterov else buf
        else:
            d = grad
        return param - lr * d


@dataclass
class AdaptedState:
    """One recorded meta-train step: adapted parameters plus bookkeeping."""

    params: dict[str, torch.Tensor]
    split: ConfidenceSplit | None
    losses: MinimaxLosses | None
    skipped: bool
    second_order: bool


def _check_finite(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss).all():
        raise EngineError(f"non-finite {what}: {float(loss.detach())}")


def meta_train_step(
    model: nn.Module,
    x: torch.Tensor,
    cfg: AdaptationConfig,
    partition: ParamPartition,
    split: ConfidenceSplit | None = None,
    record: bool | None = None,
    opt_state: SgdState | None = None,
) -> AdaptedState:
    """Run k alternating beta/gamma updates on one unlabeled batch.

    Returns the adapted parameters as a functional overlay; the module's own
    parameters are untouched. When ``record`` is set the overlay carries the
    autograd graph back to the pre-step parameters.
    """
    record = cfg.second_order if record is None else record
    entropy_fn = ENTROPY_REGISTRY[cfg.entropy_fn]
    params = dict(model.named_parameters())
    cur: dict[str, torch.Tensor] = dict(params)
    state = opt_state if opt_state is not None else SgdState()

    logits = functional_call(model, cur, (x,))
    _check_finite(logits.sum(), "logits")
    if split is None:
        split = confidence_split(logits, cfg.kappa)
    if split.is_empty:
        return AdaptedState(params=cur, split=split, losses=None, skipped=True,
                            second_order=record)

    losses = None
    for step in range(cfg.k):
        if step > 0:
            logits = functional_call(model, cur, (x,))
        losses = minimax_objectives(logits, split, cfg.lam, entropy_fn)
        _check_finite(losses.beta_loss, "beta loss")
        if partition.theta_beta:
            beta_params = [cur[n] for n in partition.theta_beta]
            grads = torch.autograd.grad(
                losses.beta_loss, beta_params, create_graph=record, allow_unused=True
            )
            for name, p, g in zip(partition.theta_beta, beta_params, grads):
                if g is None:
                    continue
                cur[name] = state.step(f"beta:{name}", p, g, cfg.lr, cfg.momentum)
            logits = functional_call(model, cur, (x,))
        losses = minimax_objectives(logits, split, cfg.lam, entropy_fn)
        _check_finite(losses.gamma_loss, "gamma loss")
        gamma_params = [cur[n] for n in partition.theta_gamma]
        grads = torch.autograd.grad(
            losses.gamma_loss, gamma_params, create_graph=record, allow_unused=True
        )
        for name, p, g in zip(partition.theta_gamma, gamma_params, grads):
            if g is None:
                continue
            new = state.step(f"gamma:{name}", p, g, _inner_lr(name, cfg), cfg.momentum)
            if _is_alpha(name):
                new = new.clamp(0.0, 1.0)
            cur[name] = new

    if not record:
        cur = {n: t.detach() for n, t in cur.items()}
    return AdaptedState(params=cur, split=split, losses=losses, skipped=False,
                        second_order=record)


def apply_adapted_state(model: nn.Module, adapted: AdaptedState) -> None:
    """Copy the functional overlay back into the module parameters."""
    with torch.no_grad():
        params = dict(model.named_parameters())
        for name, value in adapted.params.items():
            if value is not params[name]:
                params[name].copy_(value.detach())


def meta_test_step(
    model: nn.Module,
    adapted: AdaptedState,
    batch: tuple[torch.Tensor, torch.Tensor],
    cfg: AdaptationConfig,
    partition: ParamPartition,
    outer_state: SgdState,
    head_names: list[str] | None = None,
) -> float:
    """Supervised outer update from the adapted model's loss on labeled data.

    Updates the pre-step adaptable parameters with the gradient flowing
    through the recorded inner step; the classifier head (if given) gets a
    plain first-order update at its own rate.
    """
    x, y = batch
    params = dict(model.named_parameters())
    head_names = head_names or []
    target_names = [n for n in partition.adaptable + head_names]

    if adapted.second_order:
        if not any(t.grad_fn is not None for t in adapted.params.values()):
            raise EngineError(
                "second_order is set but the adapted state carries no recorded graph"
            )
        logits = functional_call(model, adapted.params, (x,))
        g_loss = F.cross_entropy(logits, y)
        _check_finite(g_loss, "meta-test loss")
        leaves = [params[n] for n in target_names]
        grads = torch.autograd.grad(g_loss, leaves, allow_unused=True)
    else:
        # first-order fallback: gradient of G at the adapted parameters,
        # applied to the pre-step parameters
        detached = {n: t.detach().clone().requires_grad_(True) for n, t in adapted.params.items()}
        logits = functional_call(model, detached, (x,))
        g_loss = F.cross_entropy(logits, y)
        _check_finite(g_loss, "meta-test loss")
        leaves = [detached[n] for n in target_names]
        grads = torch.autograd.grad(g_loss, leaves, allow_unused=True)

    with torch.no_grad():
        for name, g in zip(target_names, grads):
            if g is None:
                continue
            p = params[name]
            if name in head_names:
                lr, wd = cfg.classifier_lr, cfg.weight_decay
            elif _is_alpha(name):
                lr, wd = cfg.alpha_lr, 0.0
            else:
                lr, wd = cfg.meta_lr, cfg.weight_decay
            new = outer_state.step(f"outer:{name}", p, g, lr, cfg.momentum, weight_decay=wd)
            if _is_alpha(name):
                new = new.clamp(0.0, 1.0)
            p.copy_(new)
    return float(g_loss.detach())


def head_parameter_names(model: nn.Module) -> list[str]:
    """Parameters of the classifier head, updated only in the outer step."""
    if hasattr(model, "classifier"):
        return [f"classifier.{n}" for n, _ in model.classifier.named_parameters()]
    return []


def _iterate_batches(
    domains: list[tuple[np.ndarray, np.ndarray]],
    batch_size: int,
    rng: np.random.Generator,
):
    """Yield (domain_index, x, y) minibatches, each drawn from one domain."""
    orders = [rng.permutation(len(y)) for _, y in domains]
    cursors = [0] * len(domains)
    schedule = []
    for d, (_, y) in enumerate(domains):
        schedule += [d] * (len(y) // batch_size)
    rng.shuffle(schedule)
    for d in schedule:
        idx = orders[d][cursors[d]: cursors[d] + batch_size]
        cursors[d] += batch_size
        X, y = domains[d]
        yield d, torch.from_numpy(X[idx]), torch.from_numpy(y[idx].astype(np.int64))


def _erm_pretrain(
    model: nn.Module,
    domains: list[tuple[np.ndarray, np.ndarray]],
    cfg: AdaptationConfig,
    epochs: int,
    rng: np.random.Generator,
) -> None:
    set_stats_mode(model, "batch")
    set_source_stat_tracking(model, True)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.pretrain_lr, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, nesterov=True,
    )
    for epoch in range(epochs):
        total, seen = 0.0, 0
        for _, x, y in _iterate_batches(domains, cfg.batch_size, rng):
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            _check_finite(loss, "pretrain loss")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(y)
            seen += len(y)
        logger.info("pretrain epoch %d: ce=%.4f", epoch, total / max(seen, 1))
    # alpha never trains during warm-up; keep it at its configured init
    with torch.no_grad():
        for _, m in mixed_bn_modules(model):
            m.alpha.clamp_(0.0, 1.0)


def refresh_source_stats(
    model: nn.Module,
    domains: list[tuple[np.ndarray, np.ndarray]],
    cfg: AdaptationConfig,
    rng: np.random.Generator,
    passes: int = 2,
) -> None:
    """Recompute the frozen running statistics for the current parameters.

    Called at the end of source training so the deployed snapshot reflects
    the final weights, not the warm-up ones.
    """
    set_stats_mode(model, "batch")
    set_source_stat_tracking(model, True)
    with torch.no_grad():
        for _ in range(passes):
            for _, x, _ in _iterate_batches(domains, cfg.batch_size, rng):
                model(x)
    set_source_stat_tracking(model, False)
    set_stats_mode(model, "mixed")


def fit_source(
    model: nn.Module,
    domains: list[tuple[np.ndarray, np.ndarray]],
    cfg: AdaptationConfig,
    epochs: int,
    pretrain_epochs: int,
    seed: int = 0,
    meta_l: bool = True,
    shift_aug: bool = True,
    on_epoch_end=None,
) -> nn.Module:
    """Two-stage source training: ERM warm-up, then the episodic meta loop.

    ``domains`` is a list of (images, labels) arrays; each minibatch is drawn
    from a single domain and, when shift synthesis is on, transformed by one
    fresh per-batch draw.
    """
    if not domains or all(len(y) == 0 for _, y in domains):
        raise EngineError("no labeled source data")
    rng = np.random.default_rng(seed)
    _erm_pretrain(model, domains, cfg, pretrain_epochs, rng)
    # stats snapshot is frozen from here on
    set_source_stat_tracking(model, False)
    if on_epoch_end is not None:
        on_epoch_end(-1, model)
    if not meta_l:
        refresh_source_stats(model, domains, cfg, rng)
        return model

    set_stats_mode(model, "mixed")
    partition = partition_parameters(model, cfg.layer_selector)
    head_names = head_parameter_names(model)
    outer_state = SgdState()
    shift_layer = getattr(model, "shift_layer", None)
    for epoch in range(epochs):
        batches = list(_iterate_batches(domains, cfg.batch_size, rng))
        g_total, steps, skipped = 0.0, 0, 0
        for i, (_, x, y) in enumerate(batches):
            if shift_aug and shift_layer is not None:
                shift_layer.active = True
                shift_layer.resample(rng)
            adapted = meta_train_step(model, x, cfg, partition)
            if adapted.skipped:
                skipped += 1
                continue
            # fresh batch from the same synthesized domain when available
            if i + 1 < len(batches):
                x_mt, y_mt = batches[i + 1][1], batches[i + 1][2]
            else:
                x_mt, y_mt = x, y
            g = meta_test_step(model, adapted, (x_mt, y_mt), cfg, partition,
                               outer_state, head_names)
            g_total += g
            steps += 1
            if losses := adapted.losses:
                logger.debug(
                    "epoch %d step %d: l_pseudo=%.4f h_mean=%.4f G=%.4f alpha=%s",
                    epoch, i, float(losses.l_pseudo.detach()),
                    float(losses.h_mean.detach()), g,
                    alpha_summary(model),
                )
        logger.info(
            "meta epoch %d: G=%.4f steps=%d skipped=%d alpha=%s",
            epoch, g_total / max(steps, 1), steps, skipped, alpha_summary(model),
        )
        if shift_layer is not None:
            shift_layer.active = False
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    refresh_source_stats(model, domains, cfg, rng)
    return model
