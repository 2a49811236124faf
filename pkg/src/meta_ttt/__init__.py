"""Meta-learned mixed-BN test-time training."""

from .config import AblationFlags, AdaptationConfig, ConfigError, ExperimentConfig, parse_config
from .estimator import MetaTTTClassifier
from .harness import Corpus, CorruptionSpec, corrupt, generate_digits, load_corpus, make_domains
from .experiment import compare_methods, evaluate_method, train_baseline_model, train_model
from .meta_engine import (
    ParamPartition,
    fit_source,
    meta_test_step,
    meta_train_step,
    partition_parameters,
    refresh_source_stats,
)
from .metrics import MetricsRecord, summarize, write_metrics
from .mixed_bn import MixedBatchNorm2d, batch_stats, mixed_stats, normalize, project_alpha
from .models import DigitCNN, ToyNet
from .objectives import confidence_split, mean_entropy, minimax_objectives, pseudo_label_loss
from .shift import ShiftDraw, apply_shift, sample_mask, sample_shift, sample_transform
from .tta import adapt_stream, baseline_predict, make_stream, reset_adaptation

__all__ = [
    "AblationFlags",
    "AdaptationConfig",
    "ConfigError",
    "Corpus",
    "CorruptionSpec",
    "DigitCNN",
    "ExperimentConfig",
    "MetaTTTClassifier",
    "MetricsRecord",
    "MixedBatchNorm2d",
    "ParamPartition",
    "ShiftDraw",
    "ToyNet",
    "adapt_stream",
    "apply_shift",
    "baseline_predict",
    "batch_stats",
    "compare_methods",
    "confidence_split",
    "corrupt",
    "evaluate_method",
    "fit_source",
    "generate_digits",
    "load_corpus",
    "make_domains",
    "make_stream",
    "mean_entropy",
    "meta_test_step",
    "meta_train_step",
    "minimax_objectives",
    "mixed_stats",
    "normalize",
    "parse_config",
    "partition_parameters",
    "project_alpha",
    "pseudo_label_loss",
    "refresh_source_stats",
    "reset_adaptation",
    "train_baseline_model",
    "train_model",
    "sample_mask",
    "sample_shift",
    "sample_transform",
    "summarize",
    "write_metrics",
]
