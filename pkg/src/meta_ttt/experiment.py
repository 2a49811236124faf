"""End-to-end experiment plumbing shared by the CLI and the test harness."""
from __future__ import annotations

import copy
import logging
from pathlib import Path

import numpy as np
import torch

from .config import ABLATION_GRID, AblationFlags, ExperimentConfig
from .harness import Corpus, CorruptionSpec, corrupt, load_corpus
from .meta_engine import fit_source
from .metrics import MetricsRecord, summarize
from .models import DigitCNN
from .tta import (
    adapt_stream,
    baseline_predict,
    make_stream,
    reset_adaptation,
    take_deployment_snapshot,
)

logger = logging.getLogger(__name__)


def build_model(cfg: ExperimentConfig) -> DigitCNN:
    return DigitCNN(
        num_classes=cfg.num_classes,
        alpha_init=cfg.adapt.alpha_init,
        shift_p=cfg.adapt.shift_p,
    )


def source_corpus(cfg: ExperimentConfig) -> Corpus:
    return load_corpus(cfg.corpus_kind, n=cfg.corpus_n, seed=cfg.corpus_seed,
                       class_count=cfg.num_classes)


def target_corpus(cfg: ExperimentConfig, corrupted: bool = True) -> Corpus:
    # held-out draw, disjoint seed stream from the training corpus
    clean = load_corpus(cfg.corpus_kind, n=cfg.corpus_test_n,
                        seed=cfg.corpus_seed + 10_000, class_count=cfg.num_classes)
    if not corrupted:
        return clean
    spec = CorruptionSpec(cfg.corruption_kind, cfg.corruption_severity, cfg.corruption_seed)
    return corrupt(clean, spec)


def train_model(
    cfg: ExperimentConfig,
    seed: int,
    corpus: Corpus | None = None,
    on_epoch_end=None,
) -> DigitCNN:
    """Train one source model under the configured ablation flags."""
    torch.manual_seed(seed)
    model = build_model(cfg)
    corpus = corpus if corpus is not None else source_corpus(cfg)
    acfg = copy.deepcopy(cfg.adapt)
    if not cfg.ablation.minimax:
        # entropy minimization everywhere: no adversarial layer set
        acfg.layer_selector = "none"
    fit_source(
        model,
        [(corpus.images, corpus.labels)],
        acfg,
        epochs=cfg.epochs,
        pretrain_epochs=cfg.pretrain_epochs,
        seed=seed,
        meta_l=cfg.ablation.meta_l,
        shift_aug=cfg.ablation.shift_aug,
        on_epoch_end=on_epoch_end,
    )
    take_deployment_snapshot(model)
    return model


def train_baseline_model(cfg: ExperimentConfig, seed: int,
                         corpus: Corpus | None = None) -> DigitCNN:
    """Plain ERM reference model for the Source/AdaBN/Tent rows.

    The baselines describe adaptation of a conventionally trained network,
    so they get their own model without the meta stage or shift synthesis.
    """
    bcfg = copy.deepcopy(cfg)
    bcfg.ablation = AblationFlags(
        mixed_bn=cfg.ablation.mixed_bn, meta_l=False, shift_aug=False, minimax=False
    )
    return train_model(bcfg, seed, corpus=corpus)


def compare_methods(cfg: ExperimentConfig, seed: int, target: Corpus,
                    corpus: Corpus | None = None) -> dict[str, dict]:
    """Train the paired models for one seed and evaluate all four methods."""
    meta_model = train_model(cfg, seed, corpus=corpus)
    erm_model = train_baseline_model(cfg, seed, corpus=corpus)
    bcfg = copy.deepcopy(cfg)
    bcfg.ablation = AblationFlags(
        mixed_bn=cfg.ablation.mixed_bn, meta_l=False, shift_aug=False, minimax=False
    )
    out = {}
    for method in ("source", "adabn", "tent"):
        _, records, summary = evaluate_method(erm_model, target, method, bcfg)
        summary["records"] = records
        out[method] = summary
    _, records, summary = evaluate_method(meta_model, target, "meta_ttt", cfg)
    summary["records"] = records
    out["meta_ttt"] = summary
    return out


def evaluate_method(
    model: DigitCNN,
    target: Corpus,
    method: str,
    cfg: ExperimentConfig,
    batch_size: int | None = None,
) -> tuple[np.ndarray, list[MetricsRecord], dict]:
    """Run one method over a fresh stream of the target corpus.

    Adaptation always starts from the deployed snapshot, so methods compare
    against the same model state.
    """
    reset_adaptation(model)
    stream = make_stream(target, batch_size or cfg.adapt.batch_size)
    acfg = copy.deepcopy(cfg.adapt)
    if not cfg.ablation.minimax:
        acfg.layer_selector = "none"
    if not cfg.ablation.meta_l:
        # without meta-learned interpolation the weight stays a fixed prior
        acfg.alpha_lr = 0.0
    if method == "meta_ttt":
        preds, records, audit = adapt_stream(model, stream, acfg)
    else:
        preds, records, audit = baseline_predict(model, stream, method, acfg)
    if not audit.clean:
        raise RuntimeError(f"label hygiene audit failed: {audit.purposes}")
    summary = summarize(records)
    summary["method"] = method
    summary["batch_size"] = batch_size or cfg.adapt.batch_size
    return preds, records, summary


def curve_callback(cfg: ExperimentConfig, target: Corpus, rows: list[tuple[int, float]]):
    """Per-epoch hook: adapt a copy of the model and record its accuracy."""

    def hook(epoch: int, model: DigitCNN) -> None:
        probe = copy.deepcopy(model)
        take_deployment_snapshot(probe)
        _, _, summary = evaluate_method(probe, target, "meta_ttt", cfg)
        rows.append((epoch, 1.0 - summary["mean_error"]))

    return hook


def write_curve(rows: list[tuple[int, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,adapted_accuracy"]
    lines += [f"{e},{repr(float(a))}" for e, a in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def ablation_configs(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    rows = []
    for flags in ABLATION_GRID:
        row_cfg = copy.deepcopy(cfg)
        row_cfg.ablation = AblationFlags(*flags)
        rows.append(row_cfg)
    return rows
