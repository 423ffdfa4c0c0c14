"""Deterministic SVG figures, each saved next to a CSV of exactly the plotted values."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "lateralview"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def plot_sweep(curves: dict, svg_path, csv_path=None) -> None:
    """``curves``: model name -> list of (proportion_paired, mean_auc)."""
    svg_path = Path(svg_path)
    csv_path = csv_path or svg_path.with_suffix(".csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = []
    for name, pts in curves.items():
        xs = [p for p, _ in pts]
        ys = [a for _, a in pts]
        ax.plot(xs, ys, label=name)
        rows += [[name, repr(x), repr(y)] for x, y in pts]
    ax.set_xlabel("proportion of test patients with a paired lateral view")
    ax.set_ylabel("macro AUC")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, svg_path)
    _write_csv(csv_path, ["model", "proportion_paired", "macro_auc"], rows)


def plot_label_bars(bars: list, name_a: str, name_b: str, svg_path, csv_path=None) -> None:
    """``bars``: list of (label, n_samples, auc_b, auc_a); B is drawn as the darker baseline."""
    svg_path = Path(svg_path)
    csv_path = csv_path or svg_path.with_suffix(".csv")
    fig, ax = plt.subplots(figsize=(6, 0.35 * max(len(bars), 1) + 1.2))
    ticks = [f"{label} ({n})" for label, n, _, _ in bars]
    ys = range(len(bars))
    ax.barh(list(ys), [a for *_, a in bars], color="#9ecae1", label=name_a)
    ax.barh(list(ys), [b for _, _, b, _ in bars], color="#3182bd", label=name_b)
    ax.set_yticks(list(ys))
    ax.set_yticklabels(ticks, fontsize=7)
    ax.set_xlabel("AUC")
    ax.set_xlim(0.0, 1.0)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    _save(fig, svg_path)
    _write_csv(csv_path, ["label", "n_samples", f"auc_{name_b}", f"auc_{name_a}"],
               [[l, n, repr(b), repr(a)] for l, n, b, a in bars])


def plot_search(distributions: dict, svg_path, csv_path=None) -> None:
    """Box plot of validation AUC over search trials; ``distributions``: model -> scores."""
    svg_path = Path(svg_path)
    csv_path = csv_path or svg_path.with_suffix(".csv")
    names = list(distributions)
    fig, ax = plt.subplots(figsize=(1.2 * max(len(names), 2) + 2, 4))
    data = [distributions[n] for n in names]
    ax.boxplot(data, showfliers=True)
    for i, vals in enumerate(data, start=1):
        ax.plot([i] * len(vals), vals, "k.", alpha=0.5)
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("validation macro AUC")
    fig.tight_layout()
    _save(fig, svg_path)
    _write_csv(csv_path, ["model", "val_auc"],
               [[n, repr(v)] for n in names for v in distributions[n]])
