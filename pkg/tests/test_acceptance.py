"""Acceptance gate: ten checks, one pass/fail line each.

Criteria 1-5 are statistical/numerical oracles and run in seconds. Criteria
6-10 share one desk-scale benchmark fixture (twelve trained models: the 4-row
component grid over 3 seeds) and take several minutes in total.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.
"""
import copy
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from meta_ttt.cli import main as cli_main
from meta_ttt.config import ABLATION_GRID, AblationFlags, ExperimentConfig
from meta_ttt.experiment import (
    curve_callback,
    evaluate_method,
    target_corpus,
    train_model,
    write_curve,
)
from meta_ttt.meta_engine import (
    SgdState,
    meta_train_step,
    partition_parameters,
)
from meta_ttt.metrics import write_metrics
from meta_ttt.mixed_bn import MixedBatchNorm2d, batch_stats, mixed_stats
from meta_ttt.models import ToyNet
from meta_ttt.objectives import confidence_split, mean_entropy, minimax_objectives
from meta_ttt.shift import sample_shift, sample_transform
from meta_ttt.tta import adapt_stream, make_stream, reset_adaptation
from meta_ttt.config import AdaptationConfig

SEEDS = (0, 1, 2)


def report(line: str) -> None:
    print(f"\n[acceptance] {line}")


# ---------------------------------------------------------------------------
# criteria 1-5: oracles
# ---------------------------------------------------------------------------


def test_c01_pooling_oracle():
    """Mixed stats with alpha = |B|/(|A|+|B|) equal pooled moments, 1000 pairs."""
    rng = np.random.default_rng(0)
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(1, 8))
        na, nb = int(rng.integers(2, 40)), int(rng.integers(2, 40))
        loc = rng.normal(0, 2, size=2)
        za = rng.normal(loc[0], rng.uniform(0.5, 2.0), size=(na, c, 2, 2))
        zb = rng.normal(loc[1], rng.uniform(0.5, 2.0), size=(nb, c, 2, 2))
        sa = batch_stats(torch.from_numpy(za))
        sb = batch_stats(torch.from_numpy(zb))
        alpha = torch.full((c,), nb / (na + nb), dtype=torch.float64)
        mu, var = mixed_stats(sa.mu_t, sa.var_t, sb.mu_t, sb.var_t, alpha)
        pooled = np.concatenate([za, zb], axis=0).transpose(1, 0, 2, 3).reshape(c, -1)
        worst = max(
            worst,
            float(np.abs(mu.numpy() - pooled.mean(axis=1)).max()),
            float(np.abs(var.numpy() - pooled.var(axis=1)).max()),
        )
    elapsed = time.time() - t0
    assert worst <= 1e-6, worst
    assert elapsed < 10.0, elapsed
    report(f"C1 pooling oracle: PASS (worst abs dev {worst:.2e}, {elapsed:.1f}s)")


def test_c02_endpoint_equivalence():
    """alpha=1 matches a plain-BN oracle; alpha=0 matches frozen-stat inference."""
    torch.manual_seed(0)
    z = torch.randn(32, 6, 5, 5, dtype=torch.float64)

    layer = MixedBatchNorm2d(6, alpha_init=1.0).double()
    with torch.no_grad():
        layer.weight.copy_(torch.rand(6, dtype=torch.float64) + 0.5)
        layer.bias.copy_(torch.randn(6, dtype=torch.float64))
        layer.source_mean.normal_()  # must be ignored at alpha=1
        layer.source_var.uniform_(0.5, 2.0)
    # independent oracle: explicit per-channel standardization
    flat = z.permute(1, 0, 2, 3).reshape(6, -1)
    mu, var = flat.mean(dim=1), flat.var(dim=1, unbiased=False)
    oracle = (z - mu.view(1, -1, 1, 1)) / torch.sqrt(var.view(1, -1, 1, 1) + layer.eps)
    oracle = oracle * layer.weight.view(1, -1, 1, 1) + layer.bias.view(1, -1, 1, 1)
    dev1 = float((layer(z) - oracle).detach().abs().max())
    assert dev1 <= 1e-6, dev1

    layer0 = MixedBatchNorm2d(6, alpha_init=0.0).double()
    with torch.no_grad():
        layer0.source_mean.normal_()
        layer0.source_var.uniform_(0.5, 2.0)
    out_mixed = layer0(z)
    layer0.set_stats_mode("source")
    assert torch.equal(out_mixed, layer0(z))  # exact, not approximate
    report(f"C2 endpoint equivalence: PASS (alpha=1 dev {dev1:.2e}, alpha=0 exact)")


def _toy_problem(seed: int):
    torch.manual_seed(seed)
    model = ToyNet().double()
    with torch.no_grad():
        model.bn.source_mean.copy_(torch.randn(3, dtype=torch.float64) * 0.3)
        model.bn.source_var.copy_(torch.rand(3, dtype=torch.float64) + 0.5)
    x_in = torch.randn(16, 4, dtype=torch.float64)
    x_out = torch.randn(16, 4, dtype=torch.float64)
    y_out = torch.randint(0, 3, (16,))
    cfg = AdaptationConfig(momentum=0.0, kappa=0.4)
    part = partition_parameters(model, cfg.layer_selector)
    logits = functional_call(model, dict(model.named_parameters()), (x_in,))
    split = confidence_split(logits, cfg.kappa)
    return model, x_in, (x_out, y_out), cfg, part, split


def _composed_loss(model, x_in, xy, cfg, part, split) -> float:
    adapted = meta_train_step(model, x_in, cfg, part, split=split, record=False)
    logits = functional_call(model, adapted.params, (xy[0],))
    return float(F.cross_entropy(logits, xy[1]))


def test_c03_meta_gradient_vs_finite_differences():
    """Outer gradient through one inner minimax step vs central differences."""
    t0 = time.time()
    worst_rel = 0.0
    for seed in range(20):
        model, x_in, xy, cfg, part, split = _toy_problem(seed)
        n_params = sum(p.numel() for p in model.parameters())
        assert n_params <= 100, n_params
        adapted = meta_train_step(model, x_in, cfg, part, split=split)
        logits = functional_call(model, adapted.params, (xy[0],))
        g_loss = F.cross_entropy(logits, xy[1])
        params = dict(model.named_parameters())
        leaves = [params[n] for n in part.adaptable]
        grads = torch.autograd.grad(g_loss, leaves, allow_unused=True)
        engine, fd = [], []
        h = 1e-6
        for name, g in zip(part.adaptable, grads):
            if g is None:
                continue
            p = params[name]
            for j in range(p.numel()):
                idx = np.unravel_index(j, p.shape)
                with torch.no_grad():
                    p[idx] += h
                lp = _composed_loss(model, x_in, xy, cfg, part, split)
                with torch.no_grad():
                    p[idx] -= 2 * h
                lm = _composed_loss(model, x_in, xy, cfg, part, split)
                with torch.no_grad():
                    p[idx] += h
                engine.append(float(g.flatten()[j]))
                fd.append((lp - lm) / (2 * h))
        engine, fd = np.asarray(engine), np.asarray(fd)
        rel = float(np.linalg.norm(engine - fd) / max(np.linalg.norm(fd), 1e-12))
        worst_rel = max(worst_rel, rel)
        assert rel <= 1e-4, (seed, rel)
    elapsed = time.time() - t0
    assert elapsed < 60.0, elapsed
    report(f"C3 meta-gradient: PASS (worst rel err {worst_rel:.2e} over 20 seeds, "
           f"{elapsed:.1f}s)")


def test_c04_minimax_directionality():
    """On low-confidence batches a beta-step raises entropy, a gamma-step lowers it."""
    step = 1e-3
    beta_up = gamma_down = 0
    for trial in range(100):
        torch.manual_seed(10_000 + trial)
        model = ToyNet().double()
        with torch.no_grad():
            model.bn.source_mean.copy_(torch.randn(3, dtype=torch.float64) * 0.2)
            model.bn.source_var.copy_(torch.rand(3, dtype=torch.float64) + 0.5)
        x = torch.randn(32, 4, dtype=torch.float64)
        part = partition_parameters(model, "last")
        params = dict(model.named_parameters())
        logits = functional_call(model, params, (x,))
        split = confidence_split(logits, 0.99)  # effectively everything low-conf
        if split.lowconf_indices.numel() < 32:
            split = confidence_split(logits * 0, 0.99)  # force all low-conf
        h_before = float(mean_entropy(logits[split.lowconf_indices]).detach())
        losses = minimax_objectives(logits, split, lam=1.0)

        beta_leaves = [params[n] for n in part.theta_beta]
        grads = torch.autograd.grad(losses.beta_loss, beta_leaves, retain_graph=True,
                                    allow_unused=True)
        cur = dict(params)
        for n, p, g in zip(part.theta_beta, beta_leaves, grads):
            if g is not None:
                cur[n] = p - step * g
        h_beta = float(mean_entropy(
            functional_call(model, cur, (x,))[split.lowconf_indices]).detach())

        gamma_leaves = [params[n] for n in part.theta_gamma]
        grads = torch.autograd.grad(losses.gamma_loss, gamma_leaves, allow_unused=True)
        cur = dict(params)
        for n, p, g in zip(part.theta_gamma, gamma_leaves, grads):
            if g is not None:
                cur[n] = p - step * g
        h_gamma = float(mean_entropy(
            functional_call(model, cur, (x,))[split.lowconf_indices]).detach())

        beta_up += h_beta > h_before
        gamma_down += h_gamma < h_before
    assert beta_up >= 95, beta_up
    assert gamma_down >= 95, gamma_down
    report(f"C4 minimax directionality: PASS (beta up {beta_up}/100, "
           f"gamma down {gamma_down}/100)")


def test_c05_shift_statistics():
    rng = np.random.default_rng(0)
    draw = sample_shift(0.0, 512, rng)
    z = torch.randn(4, 512, 2, 2)
    from meta_ttt.shift import apply_shift
    assert apply_shift(z, draw) is z  # bit-exact identity at p=0

    rng = np.random.default_rng(1)
    counts = [int(sample_shift(0.5, 1024, rng).mask.sum()) for _ in range(50)]
    assert all(460 <= c <= 564 for c in counts), (min(counts), max(counts))

    rng = np.random.default_rng(2)
    gamma, _ = sample_transform(np.ones(100_000, dtype=np.int64), rng)
    gamma_mean = float(gamma.mean())
    assert abs(gamma_mean - 0.5) <= 0.01, gamma_mean
    report(f"C5 shift statistics: PASS (counts [{min(counts)},{max(counts)}], "
           f"masked-gamma mean {gamma_mean:.4f})")


# ---------------------------------------------------------------------------
# criteria 6-10: desk-scale benchmark
# ---------------------------------------------------------------------------


def bench_config() -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.corpus_n = 3000
    cfg.corpus_test_n = 3000
    cfg.epochs = 6
    cfg.adapt.shift_p = 0.3
    cfg.corruption_kind = "gaussian_noise"
    cfg.corruption_severity = 5
    cfg.seeds = list(SEEDS)
    return cfg


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """Train the 4-row component grid for 3 seeds and evaluate everything the
    experiment criteria need. Row 0 (interpolated BN only, no meta stage)
    doubles as the plain ERM reference model for the baseline methods."""
    cfg = bench_config()
    target = target_corpus(cfg)
    out = {
        "cfg": cfg,
        "target": target,
        "rows": {i: {} for i in range(4)},   # row -> seed -> dict
        "methods": {m: [] for m in ("source", "adabn", "tent", "meta_ttt")},
        "batch_errors": {16: [], 32: [], 64: []},
        "curves": {},
        "c6_seconds": 0.0,
        "models": {},
    }
    workdir = tmp_path_factory.mktemp("bench")
    for seed in SEEDS:
        for i, flags in enumerate(ABLATION_GRID):
            rcfg = copy.deepcopy(cfg)
            rcfg.ablation = AblationFlags(*flags)
            hook = None
            rows_acc: list[tuple[int, float]] = []
            if seed == 0 and i in (2, 3):  # plain-entropy and minimax curves
                hook = curve_callback(rcfg, target, rows_acc)
            t0 = time.time()
            model = train_model(rcfg, seed, on_epoch_end=hook)
            train_s = time.time() - t0
            _, _, src = evaluate_method(model, target, "source", rcfg)
            _, records, ttt = evaluate_method(model, target, "meta_ttt", rcfg)
            out["rows"][i][seed] = {
                "source_err": src["mean_error"],
                "ttt_err": ttt["mean_error"],
                "records": records,
                "train_s": train_s,
            }
            if seed == 0 and i in (2, 3):
                label = "minimax" if i == 3 else "plain"
                run_dir = workdir / label
                write_curve(rows_acc, run_dir / "curve.csv")
                out["curves"][label] = (run_dir, rows_acc)
            if i in (0, 3):
                out["c6_seconds"] += train_s
            if i == 0:
                for method in ("source", "adabn", "tent"):
                    t0 = time.time()
                    _, _, summary = evaluate_method(model, target, method, rcfg)
                    out["c6_seconds"] += time.time() - t0
                    out["methods"][method].append(summary["mean_error"])
            if i == 3:
                t0 = time.time()
                out["methods"]["meta_ttt"].append(
                    out["rows"][3][seed]["ttt_err"])
                for bs in (16, 32, 64):
                    _, _, summary = evaluate_method(model, target, "meta_ttt", cfg,
                                                    batch_size=bs)
                    out["batch_errors"][bs].append(summary["mean_error"])
                out["c6_seconds"] += time.time() - t0
                if seed == 0:
                    out["models"]["full_seed0"] = model
                    out["models"]["full_seed0_cfg"] = rcfg
    out["workdir"] = workdir
    return out


def test_c06_desk_scale_ordering(bench):
    errs = {m: float(np.mean(v)) for m, v in bench["methods"].items()}
    full, tent, source = errs["meta_ttt"], errs["tent"], errs["source"]
    assert full + 0.01 <= tent, (full, tent)
    assert tent + 0.01 <= source, (tent, source)
    assert bench["c6_seconds"] <= 900.0, bench["c6_seconds"]
    report(
        "C6 desk-scale ordering: PASS "
        f"(full {full:.4f} < tent {tent:.4f} < source {source:.4f}, "
        f"{bench['c6_seconds']:.0f}s)"
    )


def test_c07_batch_size_robustness(bench):
    means = {bs: float(np.mean(v)) for bs, v in bench["batch_errors"].items()}
    span = max(means.values()) - min(means.values())
    assert span <= 0.02, means
    report(f"C7 batch-size robustness: PASS (errors {means}, span {span:.4f})")


def test_c08_minimax_vs_plain_entropy(bench):
    minimax_acc = 1.0 - float(np.mean([bench["rows"][3][s]["ttt_err"] for s in SEEDS]))
    plain_acc = 1.0 - float(np.mean([bench["rows"][2][s]["ttt_err"] for s in SEEDS]))
    assert minimax_acc >= plain_acc, (minimax_acc, plain_acc)
    # the report command merges the two per-epoch curves into one CSV
    mm_dir, _ = bench["curves"]["minimax"]
    pl_dir, _ = bench["curves"]["plain"]
    rep_dir = bench["workdir"] / "report"
    code = cli_main(["report", "--curve-compare", f"minimax={mm_dir}",
                     f"plain={pl_dir}", "--out", str(rep_dir)])
    assert code == 0
    lines = (rep_dir / "curve_compare.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,adapted_accuracy_minimax,adapted_accuracy_plain"
    assert len(lines) >= 2
    report(f"C8 minimax vs plain entropy: PASS (adapted acc {minimax_acc:.4f} "
           f">= {plain_acc:.4f}; curve CSV {len(lines) - 1} rows)")


def test_c09_ablation_grid(bench):
    for i in range(4):
        assert set(bench["rows"][i]) == set(SEEDS)  # ran to completion
    wins = sum(
        bench["rows"][3][s]["ttt_err"] <= bench["rows"][3][s]["source_err"]
        for s in SEEDS
    )
    assert wins >= 2, wins
    grid = {i: 1.0 - float(np.mean([bench["rows"][i][s]["ttt_err"] for s in SEEDS]))
            for i in range(4)}
    report(f"C9 ablation grid: PASS (4 rows complete, TTT>=Source in {wins}/3 seeds, "
           f"row TTT accuracies {grid})")


def test_c10_determinism_and_hygiene(bench):
    model = bench["models"]["full_seed0"]
    rcfg = bench["models"]["full_seed0_cfg"]
    target = bench["target"]
    frozen_before = {
        n: p.detach().clone() for n, p in model.named_parameters()
        if n.startswith(("conv", "stem_conv", "classifier"))
    }
    paths = []
    audits = []
    for tag in ("a", "b"):
        reset_adaptation(model)
        stream = make_stream(target, rcfg.adapt.batch_size)
        _, records, audit = adapt_stream(model, stream, rcfg.adapt)
        audits.append(audit)
        for r in records:
            _, alo, ahi = r.alpha_aggregate()
            assert 0.0 <= alo <= ahi <= 1.0
        paths.append(write_metrics(records, bench["workdir"] / f"det_{tag}.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    for n, p in model.named_parameters():
        if n in frozen_before:
            assert torch.equal(p, frozen_before[n]), n
    assert all(a.clean for a in audits)
    report("C10 determinism & hygiene: PASS (byte-identical metrics, frozen params "
           "bit-unchanged, alpha in [0,1], label audit clean)")
