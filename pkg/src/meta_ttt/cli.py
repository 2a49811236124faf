"""Command-line front-end.

    meta-ttt train   -c cfg.txt [-o key=value ...]
    meta-ttt adapt   --checkpoint ckpt [-c cfg.txt ...]
    meta-ttt compare --checkpoint ckpt ...
    meta-ttt ablate  ...
    meta-ttt sweep   --axis batch_size=16,32,64 [--axis adapt.kappa=0.8,0.9] ...
    meta-ttt report  --runs dir [dir ...] | --curve-compare label=dir ...

Exit codes: 0 success, 2 configuration error, 3 runtime/numerical error.
The output root can be overridden with META_TTT_OUTPUT_ROOT.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import experiment as exp
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ExperimentConfig,
    _set_key,
    dump_config,
    parse_config,
    write_config_echo,
)
from .meta_engine import EngineError
from .metrics import summarize, write_metrics, write_summary

logger = logging.getLogger("meta_ttt")


def _outdir(cfg: ExperimentConfig, argdir: str | None) -> Path:
    root = os.environ.get("META_TTT_OUTPUT_ROOT")
    out = Path(argdir) if argdir else Path(cfg.outdir)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> ExperimentConfig:
    return parse_config(args.config, args.override)


def _restore_model(cfg: ExperimentConfig, ckpt: str):
    model = exp.build_model(cfg)
    header = load_checkpoint(ckpt, model)
    from .tta import take_deployment_snapshot

    take_deployment_snapshot(model)
    return model, header


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args.outdir)
    write_config_echo(cfg, out)
    seed = cfg.seeds[0]
    curve_rows: list[tuple[int, float]] = []
    hook = None
    if cfg.curve_eval:
        hook = exp.curve_callback(cfg, exp.target_corpus(cfg), curve_rows)
    model = exp.train_model(cfg, seed, on_epoch_end=hook)
    save_checkpoint(model, out / "checkpoint.ckpt", config_echo=dump_config(cfg))
    if cfg.curve_eval:
        exp.write_curve(curve_rows, out / "curve.csv")
    print(f"trained seed {seed} -> {out / 'checkpoint.ckpt'}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args.outdir)
    write_config_echo(cfg, out)
    model, _ = _restore_model(cfg, args.checkpoint)
    target = exp.target_corpus(cfg)
    _, records, summary = exp.evaluate_method(model, target, cfg.method, cfg)
    write_metrics(records, out / "metrics.csv")
    write_summary(summary, out / "summary.json")
    print(f"{cfg.method}: mean_error={summary['mean_error']:.4f} ({summary['batches']} batches)")
    return 0


def cmd_compare(args) -> int:
    """Paired comparison: the full method on its meta-trained model versus
    Source/AdaBN/Tent on a plain ERM model, seed-averaged."""
    cfg = _load_cfg(args)
    out = _outdir(cfg, args.outdir)
    write_config_echo(cfg, out)
    target = exp.target_corpus(cfg)
    per_method: dict[str, list[float]] = {}
    for seed in cfg.seeds:
        results = exp.compare_methods(cfg, seed, target)
        for method, summary in results.items():
            write_metrics(summary.pop("records"), out / f"metrics_{method}_seed{seed}.csv")
            per_method.setdefault(method, []).append(summary["mean_error"])
    rows = {
        m: {"mean_error": float(np.mean(errs)), "per_seed": errs}
        for m, errs in per_method.items()
    }
    write_summary({"comparison": rows, "seeds": cfg.seeds}, out / "compare.json")
    print("method,mean_error")
    for method, summary in rows.items():
        print(f"{method},{summary['mean_error']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args.outdir)
    write_config_echo(cfg, out)
    target = exp.target_corpus(cfg)
    grid_rows = []
    for row_id, row_cfg in enumerate(exp.ablation_configs(cfg)):
        per_seed = []
        for seed in cfg.seeds:
            model = exp.train_model(row_cfg, seed)
            _, _, src = exp.evaluate_method(model, target, "source", row_cfg)
            _, records, ttt = exp.evaluate_method(model, target, "meta_ttt", row_cfg)
            write_metrics(records, out / f"metrics_row{row_id}_seed{seed}.csv")
            per_seed.append(
                {"seed": seed, "source_acc": 1.0 - src["mean_error"],
                 "ttt_acc": 1.0 - ttt["mean_error"]}
            )
        flags = row_cfg.ablation
        grid_rows.append({
            "mixed_bn": flags.mixed_bn, "meta_l": flags.meta_l,
            "shift_aug": flags.shift_aug, "minimax": flags.minimax,
            "seeds": per_seed,
            "source_acc": float(np.mean([r["source_acc"] for r in per_seed])),
            "ttt_acc": float(np.mean([r["ttt_acc"] for r in per_seed])),
        })
    write_summary({"ablation": grid_rows}, out / "ablation.json")
    print("mixed_bn,meta_l,shift_aug,minimax,source_acc,ttt_acc")
    for row in grid_rows:
        print(
            f"{int(row['mixed_bn'])},{int(row['meta_l'])},{int(row['shift_aug'])},"
            f"{int(row['minimax'])},{row['source_acc']:.4f},{row['ttt_acc']:.4f}"
        )
    return 0


SWEEP_AXES = {"batch_size", "adapt.kappa", "adapt.lam", "adapt.shift_p", "adapt.alpha_init"}


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args.outdir)
    write_config_echo(cfg, out)
    axes: list[tuple[str, list[str]]] = []
    for axis in args.axis:
        if "=" not in axis:
            raise ConfigError(f"--axis expects key=v1,v2,..., got {axis!r}")
        key, raw = axis.split("=", 1)
        if key not in SWEEP_AXES:
            raise ConfigError(f"unsupported sweep axis {key!r}; one of {sorted(SWEEP_AXES)}")
        axes.append((key, raw.split(",")))
    target = exp.target_corpus(cfg)
    cells = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        cell_cfg = copy.deepcopy(cfg)
        batch_size = None
        tags = []
        for (key, _), value in zip(axes, combo):
            tags.append(f"{key.split('.')[-1]}={value}")
            if key == "batch_size":
                batch_size = int(value)
            else:
                _set_key(cell_cfg, key, value)  # same coercion rules as config files
        cell_cfg.validate()
        tag = "_".join(tags).replace("/", "-")
        if args.checkpoint:
            model, _ = _restore_model(cell_cfg, args.checkpoint)
        else:
            model = exp.train_model(cell_cfg, cell_cfg.seeds[0])
        _, records, summary = exp.evaluate_method(
            model, target, cell_cfg.method, cell_cfg, batch_size=batch_size
        )
        write_metrics(records, out / f"metrics_{tag}.csv")
        summary["cell"] = tag
        cells.append(summary)
    write_summary({"sweep": cells}, out / "sweep.json")
    print(f"{len(cells)} sweep cells -> {out / 'sweep.json'}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    if args.runs:
        table = []
        for run in args.runs:
            summary_path = Path(run) / "summary.json"
            if not summary_path.is_file():
                raise ConfigError(f"no summary.json in {run}")
            summary = json.loads(summary_path.read_text())
            summary["run"] = str(run)
            table.append(summary)
        lines = ["run,method,mean_error,mean_entropy,batches"]
        for s in table:
            lines.append(
                f"{s['run']},{s.get('method', '?')},{s['mean_error']!r},"
                f"{s['mean_entropy']!r},{s['batches']}"
            )
        (out / "report.csv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    if args.curve_compare:
        curves = {}
        for item in args.curve_compare:
            if "=" not in item:
                raise ConfigError(f"--curve-compare expects label=rundir, got {item!r}")
            label, run = item.split("=", 1)
            curve_path = Path(run) / "curve.csv"
            if not curve_path.is_file():
                raise ConfigError(f"no curve.csv in {run}")
            rows = curve_path.read_text().strip().splitlines()[1:]
            curves[label] = {int(r.split(",")[0]): r.split(",")[1] for r in rows}
        epochs = sorted(set().union(*(c.keys() for c in curves.values())))
        labels = list(curves)
        lines = ["epoch," + ",".join(f"adapted_accuracy_{label}" for label in labels)]
        for e in epochs:
            lines.append(f"{e}," + ",".join(curves[lbl].get(e, "") for lbl in labels))
        (out / "curve_compare.csv").write_text("\n".join(lines) + "\n")
        print(f"curve comparison -> {out / 'curve_compare.csv'}")
    if not args.runs and not args.curve_compare:
        raise ConfigError("report needs --runs and/or --curve-compare")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meta-ttt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("-c", "--config", default=None, help="flat key=value config file")
        p.add_argument("-o", "--override", action="append", default=[],
                       help="config override, key=value (wins over the file)")
        p.add_argument("--outdir", default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("train", help="source training (warm-up + meta loop)"))
    common(sub.add_parser("adapt", help="streaming test-time adaptation"), checkpoint=True)
    common(sub.add_parser("compare", help="seed-averaged method comparison (trains per seed)"))
    common(sub.add_parser("ablate", help="incremental 4-row component grid"))
    sweep = sub.add_parser("sweep", help="cartesian sweep over declared axes")
    common(sweep)
    sweep.add_argument("--axis", action="append", default=[], required=True)
    sweep.add_argument("--checkpoint", default=None)
    report = sub.add_parser("report", help="summaries and curve comparisons")
    report.add_argument("--runs", nargs="*", default=[])
    report.add_argument("--curve-compare", nargs="*", default=[])
    report.add_argument("--out", default=None)
    return parser


COMMANDS = {
    "train": cmd_train,
    "adapt": cmd_adapt,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("META_TTT_LOGLEVEL", "INFO"))
    torch.manual_seed(0)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (EngineError, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
