"""Per-batch adaptation metrics and their CSV/JSON persistence.

CSV header: batch_id,error_rate,mean_entropy,alpha_mean,alpha_min,alpha_max,skipped
The alpha columns aggregate the per-layer stats (mean of means, min of mins,
max of maxes). The JSON summary is sorted-key and therefore byte-stable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

CSV_HEADER = "batch_id,error_rate,mean_entropy,alpha_mean,alpha_min,alpha_max,skipped"


@dataclass
class MetricsRecord:
    batch_id: int
    error_rate: float
    mean_entropy: float
    alpha_stats: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    skipped: bool = False

    def alpha_aggregate(self) -> tuple[float, float, float]:
        if not self.alpha_stats:
            return (float("nan"),) * 3
        means, mins, maxs = zip(*self.alpha_stats.values())
        return (sum(means) / len(means), min(mins), max(maxs))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(records: list[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER]
    for r in records:
        am, alo, ahi = r.alpha_aggregate()
        lines.append(
            f"{r.batch_id},{_fmt(r.error_rate)},{_fmt(r.mean_entropy)},"
            f"{_fmt(am)},{_fmt(alo)},{_fmt(ahi)},{int(r.skipped)}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unrecognized metrics file {path}")
    records = []
    for line in lines[1:]:
        bid, err, ent, am, alo, ahi, skipped = line.split(",")
        records.append(
            MetricsRecord(
                batch_id=int(bid),
                error_rate=float(err),
                mean_entropy=float(ent),
                alpha_stats={"all": (float(am), float(alo), float(ahi))},
                skipped=bool(int(skipped)),
            )
        )
    return records


def summarize(records: list[MetricsRecord]) -> dict:
    if not records:
        raise ValueError("no records to summarize")
    n = len(records)
    return {
        "batches": n,
        "mean_error": sum(r.error_rate for r in records) / n,
        "mean_entropy": sum(r.mean_entropy for r in records) / n,
        "skipped": sum(1 for r in records if r.skipped),
    }


def write_summary(summary: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return path
