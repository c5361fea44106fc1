"""Per-generation CSV and a text summary from a run directory.

The parameter fraction of the best gene is recomputed here from the logged
index-set sizes and the raw layer table in ``run.json``, without going
through the NetworkSpec or genome types, so it can be cross-checked against the
value the run logged.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import atomic_write_text

COLUMNS = (
    "generation", "k", "population_size", "mean_gene_params", "population_acc_mean", "population_acc_max",
    "population_acc_min", "pool_size", "pool_mean_critic_score", "pool_mean_score", "best_gene_id",
    "best_gene_params", "best_param_fraction", "best_param_fraction_logged",
)


class ReportError(ValueError):
    pass


@dataclass
class Report:
    rows: list[dict]
    csv_text: str
    summary: str


def read_records(run_dir) -> list[dict]:
    path = Path(run_dir) / "generations.jsonl"
    if not path.exists():
        raise ReportError(f"no generation records in {run_dir}")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise ReportError(f"{path} is empty")
    return records


def best_gene_fraction(best: dict, layers: list[dict]) -> float:
    """Owned conv and skip weights over all conv and skip weights, from raw layer dicts."""
    convs = [l for l in layers if l["kind"] == "conv"]
    skips = [l for l in layers if l["kind"] == "skip_connection"]

    def area(layer):
        kh, kw = layer["spatial"]["kernel"]
        return kh * kw

    total = sum(l["kernel_count"] * l["channel_count"] * area(l) for l in convs + skips)
    owned = sum(k * c * area(l) for l, k, c in zip(convs, best["kernel_sizes"], best["channel_sizes"]))
    owned += sum(k * c * area(l) for l, (k, c) in zip(skips, best["skip_sizes"]))
    return owned / total if total else 0.0


def build_report(run_dir) -> Report:
    run_dir = Path(run_dir)
    records = read_records(run_dir)
    run_meta = json.loads((run_dir / "run.json").read_text()) if (run_dir / "run.json").exists() else None
    rows = []
    for rec in records:
        best = rec.get("best_gene")
        fraction = ""
        if best is not None and run_meta is not None:
            fraction = best_gene_fraction(best, run_meta["spec"]["layers"])
        rows.append({
            "generation": rec["generation"],
            "k": rec["k"],
            "population_size": len(rec["individuals"]),
            "mean_gene_params": rec["mean_gene_params"],
            "population_acc_mean": rec["population_score_mean"],
            "population_acc_max": rec["population_score_max"],
            "population_acc_min": rec["population_score_min"],
            "pool_size": len(rec["pool"]),
            "pool_mean_critic_score": rec["pool_mean_critic_score"],
            "pool_mean_score": rec["pool_mean_score"],
            "best_gene_id": "" if best is None else best["gene_id"],
            "best_gene_params": "" if best is None else best["params"],
            "best_param_fraction": fraction,
            "best_param_fraction_logged": rec.get("best_param_fraction", ""),
        })
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return Report(rows, buf.getvalue(), _summary(rows))


def _fmt(v, pct=False):
    if v == "":
        return "n/a"
    return f"{100 * v:.2f}%" if pct else f"{v:.4f}"


def _summary(rows: list[dict]) -> str:
    first, last = rows[0], rows[-1]
    lines = [
        f"generations: {len(rows)} ({first['generation']}..{last['generation']})",
        f"population size: {last['population_size']}, task size k: {first['k']}..{last['k']}",
        f"pool mean critic score: {_fmt(first['pool_mean_critic_score'])} -> {_fmt(last['pool_mean_critic_score'])}",
        f"population accuracy (last): mean {_fmt(last['population_acc_mean'])}, "
        f"max {_fmt(last['population_acc_max'])}, min {_fmt(last['population_acc_min'])}",
        f"mean gene parameters: {first['mean_gene_params']:.0f} -> {last['mean_gene_params']:.0f}",
        f"best gene: {last['best_gene_id'] or 'n/a'} with {last['best_gene_params'] or 'n/a'} parameters, "
        f"{_fmt(last['best_param_fraction'], pct=True)} of conv weights",
    ]
    return "\n".join(lines) + "\n"


def write_report(run_dir, out_dir=None) -> Report:
    """Write ``report.csv`` and ``summary.txt`` (into ``out_dir`` or the run directory)."""
    rep = build_report(run_dir)
    out = Path(out_dir or run_dir)
    atomic_write_text(out / "report.csv", rep.csv_text)
    atomic_write_text(out / "summary.txt", rep.summary)
    return rep
