"""Report rendering: fixed-width tables, delimited rows, and figures.

Every evaluation or ablation result is persisted three ways side by side:
canonical JSON (the machine-readable artifact compared for reproducibility),
a CSV with the same rows, and a fixed-width text table for terminals.  The
report path additionally renders matplotlib bar charts next to the
delimited output.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import AblationReport, EvalReport


def render_text_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Fixed-width table with a header rule, right-padding each column."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for idx, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_delimited(path: str | Path, headers: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)


def eval_report_rows(report: EvalReport) -> tuple[list[str], list[list[object]]]:
    headers = ["fold", "accuracy", "n_samples"]
    rows: list[list[object]] = [
        [fold, f"{acc:.4f}", report.n_samples]
        for fold, acc in sorted(report.accuracy_by_fold.items())
    ]
    rows.append(["mean", f"{report.mean_accuracy:.4f}", report.n_samples])
    return headers, rows


def ablation_rows(report: AblationReport) -> tuple[list[str], list[list[object]]]:
    headers = ["variant", "mean_accuracy", "std", *[f"seed_{s}" for s in report.seeds]]
    rows = [
        [r.variant, f"{r.mean_accuracy:.4f}", f"{r.std:.4f}", *[f"{a:.4f}" for a in r.per_seed]]
        for r in report.rows
    ]
    return headers, rows


def save_eval_report(report: EvalReport, out_dir: str | Path) -> dict[str, str]:
    """Write JSON + CSV + text table + accuracy figure; returns artifact paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    headers, rows = eval_report_rows(report)
    (out / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    write_delimited(out / "eval_report.csv", headers, rows)
    (out / "eval_report.txt").write_text(render_text_table(headers, rows), encoding="utf-8")
    fig_path = out / "eval_accuracy.png"
    folds = sorted(report.accuracy_by_fold)
    accs = [report.accuracy_by_fold[f] for f in folds]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(range(len(folds)), accs, color="#4878d0")
    ax.axhline(report.mean_accuracy, color="#d65f5f", linestyle="--", label="mean")
    ax.set_xticks(range(len(folds)))
    ax.set_xticklabels([f"fold {f}" for f in folds])
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return {
        "json": str(out / "eval_report.json"),
        "csv": str(out / "eval_report.csv"),
        "table": str(out / "eval_report.txt"),
        "figure": str(fig_path),
    }


def save_ablation_report(report: AblationReport, out_dir: str | Path) -> dict[str, str]:
    """Write JSON + CSV + text table + variant-comparison figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    headers, rows = ablation_rows(report)
    (out / "ablation.json").write_text(report.to_json(), encoding="utf-8")
    write_delimited(out / "ablation.csv", headers, rows)
    (out / "ablation.txt").write_text(render_text_table(headers, rows), encoding="utf-8")
    fig_path = out / "ablation.png"
    names = [r.variant for r in report.rows]
    means = [r.mean_accuracy for r in report.rows]
    stds = [r.std for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(names)), 3.4))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="#6acc64")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("mean top-1 accuracy")
    ax.set_title(f"axis: {report.axis}")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return {
        "json": str(out / "ablation.json"),
        "csv": str(out / "ablation.csv"),
        "table": str(out / "ablation.txt"),
        "figure": str(fig_path),
    }
