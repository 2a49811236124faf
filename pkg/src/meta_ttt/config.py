"""Experiment configuration: defaults, flat key-value files, CLI overrides.

Config files are plain text with dotted keys, one ``key=value`` per line;
``#`` starts a comment. Command-line overrides use the same syntax and win
over file values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class AdaptationConfig:
    """All knobs of the adaptation algorithm."""

    lam: float = 1.0  # entropy/pseudo-label trade-off
    kappa: float = 0.9  # confidence threshold
    lr: float = 0.001
    meta_lr: float = 0.05
    alpha_lr: float = 0.1
    classifier_lr: float = 0.01
    pretrain_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    alpha_init: float = 0.75
    layer_selector: str = "last"  # "last" | "all" | "none" | comma-separated layer names
    k: int = 1  # meta-step count per batch
    batch_size: int = 64
    shift_p: float = 0.1
    second_order: bool = True
    reset_policy: str = "online"  # "online" | "episodic"
    entropy_fn: str = "shannon"
    predict_before_adapt: bool = False

    def validate(self) -> None:
        for name in ("lr", "meta_lr", "alpha_lr", "classifier_lr", "pretrain_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.alpha_init <= 1.0:
            raise ConfigError("alpha_init must be in [0,1]")
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError("kappa must be in (0,1)")
        if not 0.0 <= self.shift_p <= 1.0:
            raise ConfigError("shift_p must be in [0,1]")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if self.reset_policy not in ("online", "episodic"):
            raise ConfigError(f"unknown reset_policy {self.reset_policy!r}")


@dataclass
class AblationFlags:
    """Which components are enabled; valid combinations follow the
    incremental grid (each component presumes the previous ones)."""

    mixed_bn: bool = True
    meta_l: bool = True
    shift_aug: bool = True
    minimax: bool = True

    def validate(self) -> None:
        if self.minimax and not self.mixed_bn:
            raise ConfigError("ablation: minimax requires mixed_bn")
        if self.shift_aug and not self.meta_l:
            raise ConfigError("ablation: shift_aug requires meta_l")

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.mixed_bn, self.meta_l, self.shift_aug, self.minimax)


# the 4 incremental rows of the component grid
ABLATION_GRID: list[tuple[bool, bool, bool, bool]] = [
    (True, False, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, True, True),
]

METHODS = ("meta_ttt", "source", "adabn", "tent")


@dataclass
class ExperimentConfig:
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    corpus_kind: str = "digits"  # "digits" | path to a saved corpus directory
    corpus_n: int = 3000
    corpus_test_n: int = 1000
    corpus_seed: int = 0
    num_classes: int = 10
    corruption_kind: str = "gaussian_noise"
    corruption_severity: int = 5
    corruption_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 3
    pretrain_epochs: int = 10
    method: str = "meta_ttt"
    outdir: str = "runs/default"
    curve_eval: bool = False  # per-epoch adapted-accuracy curve during training

    def validate(self) -> None:
        self.adapt.validate()
        self.ablation.validate()
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.corruption_severity not in range(1, 6):
            raise ConfigError("corruption_severity must be in 1..5")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")


def _coerce(current, raw: str):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"expected integer, got {raw!r}") from e
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"expected float, got {raw!r}") from e
    if isinstance(current, list):
        return [int(tok) for tok in raw.split(",") if tok.strip()]
    return raw


def _set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    obj = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(obj, leaf, _coerce(getattr(obj, leaf), raw))
    except ConfigError as e:
        raise ConfigError(f"key {key!r}: {e}") from e


def _parse_lines(cfg: ExperimentConfig, lines: list[str], origin: str) -> None:
    for i, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{i}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        _set_key(cfg, key.strip(), raw.strip())


def parse_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load defaults, apply the file, apply overrides, validate."""
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        _parse_lines(cfg, p.read_text().splitlines(), str(p))
    if overrides:
        _parse_lines(cfg, list(overrides), "<override>")
    cfg.validate()
    return cfg


def _flatten(obj, prefix: str = "") -> list[tuple[str, str]]:
    rows = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            rows.extend(_flatten(value, prefix=key + "."))
        elif isinstance(value, list):
            rows.append((key, ",".join(str(v) for v in value)))
        else:
            rows.append((key, str(value)))
    return rows


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved config in the same flat key=value format (sorted, diffable)."""
    return "\n".join(f"{k}={v}" for k, v in sorted(_flatten(cfg))) + "\n"


def write_config_echo(cfg: ExperimentConfig, outdir: str | Path) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.txt"
    path.write_text(dump_config(cfg))
    return path
