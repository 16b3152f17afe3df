"""Delimited results and rendered figures.

CSV columns are fixed across all three experiments:
``mode,preset,seed,em_all,em_err_subset,em_ok_subset,n_err,n_ok,
score_source,flip_ratio`` with EM values as percentages.  Formatting is
deterministic so a rerun under the same config reproduces files
byte-for-byte.  Figures (PNG) are rendered next to each CSV.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

COLUMNS = (
    "mode",
    "preset",
    "seed",
    "em_all",
    "em_err_subset",
    "em_ok_subset",
    "n_err",
    "n_ok",
    "score_source",
    "flip_ratio",
)

_MODE_COLORS = {
    "baseline": "#7f7f7f",
    "mul_fusion": "#1f77b4",
    "append_fusion": "#2ca02c",
    "append_fusion_dec": "#d62728",
}


def _fmt(key: str, value) -> str:
    if value is None:
        return ""
    if key.startswith("em_"):
        return f"{value:.4f}"
    return str(value)


def write_results_csv(path: Path, rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([_fmt(col, row.get(col)) for col in COLUMNS])


def read_results_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_records(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps({"id": r.id, "label": r.label, "em": r.em, "score_used": r.score_used}) + "\n"
            )


# ---------------------------------------------------------------------------
# Figures


def integration_figure(path: Path, aggregates: dict) -> None:
    """Grouped bars: overall / error-subset / correct-subset EM per mode."""
    modes = list(aggregates)
    groups = ("em_all", "em_err_subset", "em_ok_subset")
    labels = ("overall", "with ASR error", "no ASR error")
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(modes)
    for i, mode in enumerate(modes):
        means = [aggregates[mode][g]["mean"] for g in groups]
        stds = [aggregates[mode][g]["std"] or 0.0 for g in groups]
        xs = [j + i * width for j in range(len(groups))]
        ax.bar(xs, means, width=width, yerr=stds, capsize=3,
               label=mode, color=_MODE_COLORS.get(mode))
    ax.set_xticks([j + width * (len(modes) - 1) / 2 for j in range(len(groups))])
    ax.set_xticklabels(labels)
    ax.set_ylabel("exact match (%)")
    ax.set_title("Integration methods, oracle confidence scores")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def flip_figure(path: Path, curve: Sequence[dict], baseline_em: float,
                breakeven: Optional[float]) -> None:
    """EM vs. flip ratio with the baseline as a horizontal reference."""
    ratios = [c["ratio"] for c in curve]
    means = [c["em_all"]["mean"] for c in curve]
    stds = [c["em_all"]["std"] or 0.0 for c in curve]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.errorbar(ratios, means, yerr=stds, marker="o", capsize=3,
                color=_MODE_COLORS["append_fusion_dec"], label="score-aware model")
    ax.axhline(baseline_em, color=_MODE_COLORS["baseline"], linestyle="--", label="baseline")
    if breakeven is not None:
        ax.axvline(breakeven, color="k", linestyle=":", alpha=0.7,
                   label=f"breakeven ratio {breakeven:.2f}")
    ax.set_xlabel("flip ratio of binary oracle scores")
    ax.set_ylabel("exact match (%)")
    ax.set_title("Exact match under corrupted confidence scores")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def sweep_figure(path: Path, presets: Sequence[str], aggregates: dict) -> None:
    """EM per noise preset for the three sweep rows."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    styles = {
        "baseline@constant": ("baseline", _MODE_COLORS["baseline"], "s"),
        "append_fusion_dec@oracle": ("oracle scores", _MODE_COLORS["append_fusion_dec"], "o"),
        "append_fusion_dec@encoder": ("encoder scores", _MODE_COLORS["mul_fusion"], "^"),
    }
    xs = range(len(presets))
    for key, (label, color, marker) in styles.items():
        means = [aggregates[p][key]["em_all"]["mean"] for p in presets]
        stds = [aggregates[p][key]["em_all"]["std"] or 0.0 for p in presets]
        ax.errorbar(xs, means, yerr=stds, marker=marker, capsize=3, color=color, label=label)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(presets)
    ax.set_xlabel("simulated recognizer preset")
    ax.set_ylabel("exact match (%)")
    ax.set_title("Exact match vs. recognizer quality")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
