"""Streaming test-time adaptation plus the comparison baselines.

The stream carries held-out labels behind an access-logging guard: the
adaptation path never sees them, and the audit log proves it after the run.
Each batch is consumed exactly once (adapt, then predict on the same batch).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import AdaptationConfig, ConfigError
from .harness import Corpus
from .meta_engine import (
    ParamPartition,
    SgdState,
    apply_adapted_state,
    meta_train_step,
    partition_parameters,
)
from .metrics import MetricsRecord
from .models import alpha_summary, mixed_bn_modules, set_stats_mode
from .objectives import mean_entropy


class LabelHygieneError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


class GuardedLabels:
    """Held-out labels; every read is logged with its stated purpose."""

    def __init__(self, labels: np.ndarray):
        self._labels = labels
        self.access_log: list[str] = []

    def read(self, purpose: str) -> np.ndarray:
        if purpose != "metrics":
            raise LabelHygieneError(f"labels requested for {purpose!r}")
        self.access_log.append(purpose)
        return self._labels

    def __len__(self) -> int:
        return len(self._labels)


@dataclass
class StreamBatch:
    inputs: torch.Tensor
    labels: GuardedLabels | None
    batch_id: int


@dataclass
class AuditReport:
    purposes: set[str] = field(default_factory=set)

    @property
    def clean(self) -> bool:
        return self.purposes <= {"metrics"}


def make_stream(corpus: Corpus, batch_size: int) -> list[StreamBatch]:
    """Ordered, label-guarded minibatch stream over a corpus."""
    batches = []
    for b, start in enumerate(range(0, len(corpus), batch_size)):
        sl = slice(start, start + batch_size)
        batches.append(
            StreamBatch(
                inputs=torch.from_numpy(corpus.images[sl]),
                labels=GuardedLabels(np.asarray(corpus.labels[sl], dtype=np.int64)),
                batch_id=b,
            )
        )
    return batches


def take_deployment_snapshot(model: torch.nn.Module) -> None:
    model._deployed_snapshot = {
        n: p.detach().clone() for n, p in model.named_parameters()
    }


def reset_adaptation(model: torch.nn.Module) -> torch.nn.Module:
    """Restore the adaptable parameters to their deployed values."""
    snapshot = getattr(model, "_deployed_snapshot", None)
    if snapshot is None:
        raise StateError("no deployment snapshot retained")
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(snapshot[n])
    return model


def _predict(model: torch.nn.Module, x: torch.Tensor) -> tuple[np.ndarray, float]:
    with torch.no_grad():
        logits = model(x)
        ent = float(mean_entropy(logits))
        return logits.argmax(dim=1).numpy(), ent


def _record(batch: StreamBatch, preds: np.ndarray, ent: float, model, skipped: bool,
            audit: AuditReport) -> MetricsRecord:
    err = float("nan")
    if batch.labels is not None and len(batch.labels):
        y = batch.labels.read("metrics")
        audit.purposes.update(batch.labels.access_log)
        err = float(np.mean(preds != y))
    return MetricsRecord(
        batch_id=batch.batch_id,
        error_rate=err,
        mean_entropy=ent,
        alpha_stats=alpha_summary(model),
        skipped=skipped,
    )


def adapt_stream(
    model: torch.nn.Module,
    stream: list[StreamBatch],
    cfg: AdaptationConfig,
    partition: ParamPartition | None = None,
) -> tuple[np.ndarray, list[MetricsRecord], AuditReport]:
    """One-pass self-supervised adaptation over the stream.

    Per batch: (episodic: restore the deployed parameters), run one
    self-supervised minimax step, then predict on the same batch. Labels feed
    metric computation only.
    """
    if getattr(model, "_deployed_snapshot", None) is None:
        take_deployment_snapshot(model)
    partition = partition or partition_parameters(model, cfg.layer_selector)
    set_stats_mode(model, "mixed")
    if hasattr(model, "shift_layer"):
        model.shift_layer.active = False
    audit = AuditReport()
    opt_state = SgdState()
    records: list[MetricsRecord] = []
    all_preds: list[np.ndarray] = []
    for batch in stream:
        if cfg.reset_policy == "episodic":
            reset_adaptation(model)
            opt_state = SgdState()
        skipped = False
        if cfg.predict_before_adapt:
            preds, ent = _predict(model, batch.inputs)
        if batch.inputs.shape[0] < 2:
            skipped = True  # zero-variance batch statistics would dominate
        else:
            adapted = meta_train_step(
                model, batch.inputs, cfg, partition, record=False, opt_state=opt_state
            )
            if adapted.skipped:
                skipped = True
            else:
                apply_adapted_state(model, adapted)
        if not cfg.predict_before_adapt:
            preds, ent = _predict(model, batch.inputs)
        records.append(_record(batch, preds, ent, model, skipped, audit))
        all_preds.append(preds)
    return np.concatenate(all_preds) if all_preds else np.empty(0, int), records, audit


def baseline_predict(
    model: torch.nn.Module,
    stream: list[StreamBatch],
    method: str,
    cfg: AdaptationConfig,
) -> tuple[np.ndarray, list[MetricsRecord], AuditReport]:
    """Source (frozen), AdaBN (batch stats), or Tent (batch stats + entropy
    descent on the BN affine parameters)."""
    if method not in ("source", "adabn", "tent"):
        raise ConfigError(f"unknown baseline method {method!r}")
    if getattr(model, "_deployed_snapshot", None) is None:
        take_deployment_snapshot(model)
    if hasattr(model, "shift_layer"):
        model.shift_layer.active = False
    set_stats_mode(model, "source" if method == "source" else "batch")
    opt = None
    if method == "tent":
        affine = [p for _, m in mixed_bn_modules(model) for p in (m.weight, m.bias)]
        opt = torch.optim.SGD(affine, lr=cfg.lr, momentum=cfg.momentum, nesterov=True)
    audit = AuditReport()
    records: list[MetricsRecord] = []
    all_preds: list[np.ndarray] = []
    for batch in stream:
        skipped = False
        if method == "tent" and batch.inputs.shape[0] >= 2:
            opt.zero_grad()
            loss = mean_entropy(model(batch.inputs))
            loss.backward()
            opt.step()
        elif method == "tent":
            skipped = True
        preds, ent = _predict(model, batch.inputs)
        records.append(_record(batch, preds, ent, model, skipped, audit))
        all_preds.append(preds)
    return np.concatenate(all_preds) if all_preds else np.empty(0, int), records, audit
