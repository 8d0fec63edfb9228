"""Report rendering: summary tables as CSV plus matplotlib figures saved
alongside them (score heatmaps, edge-strength histograms, loss curves, and
per-method F1 bars)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .attribution import AttributionTensor, edge_strength_histogram
from .graphs import LaggedGraph

# Stripping writer metadata keeps PNG bytes reproducible across reruns.
_PNG_META = {"metadata": {"Software": None}}


def _save(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, **_PNG_META)
    plt.close(fig)


def save_score_heatmap(scores, truth: LaggedGraph | None, path: str | Path,
                       title: str = "edge scores"):
    """Targets x (source, lag) heatmap; true edges outlined when truth is given."""
    arr = scores.scores if isinstance(scores, AttributionTensor) else np.asarray(scores)
    p, _, L = arr.shape
    flat = arr.reshape(p, p * L)
    fig, ax = plt.subplots(figsize=(max(6, p * L * 0.35), max(3, p * 0.35)))
    im = ax.imshow(flat, aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, fraction=0.03)
    if truth is not None:
        for i, j, lag in sorted(truth.edges):
            ax.add_patch(plt.Rectangle((j * L + lag - 1 - 0.5, i - 0.5), 1, 1,
                                       fill=False, edgecolor="red", lw=1.0))
    ax.set_xlabel("source x lag (lag-major within source)")
    ax.set_ylabel("target")
    ax.set_title(title)
    ax.set_xticks(np.arange(-0.5, p * L, L), minor=True)
    ax.grid(which="minor", color="w", lw=0.4, alpha=0.5)
    _save(fig, Path(path))


def save_edge_strength_histogram(scores, csv_path: str | Path, fig_path: str | Path):
    """Row-normalized edge strengths, overall and by lag, as CSV + bar figure."""
    edges, overall, lag1, later = edge_strength_histogram(scores)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_all", "count_lag1", "count_lag_gt1"])
        for b in range(len(overall)):
            w.writerow([repr(float(edges[b])), repr(float(edges[b + 1])),
                        int(overall[b]), int(lag1[b]), int(later[b])])
    centers = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3), sharey=True)
    for ax, counts, name in zip(axes, (overall, lag1, later),
                                ("all lags", "lag 1", "lag > 1")):
        ax.bar(centers, counts, width=width * 0.9)
        ax.set_title(name)
        ax.set_xlabel("normalized strength")
    axes[0].set_ylabel("count")
    fig.tight_layout()
    _save(fig, Path(fig_path))


def save_loss_curve(steps, losses, path: str | Path):
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    _save(fig, Path(path))


def save_f1_bars(rows: list[dict], path: str | Path, title: str = "F1 by method"):
    """Bar chart of mean F1 with std error bars; one bar per method."""
    methods = [r["method"] for r in rows]
    means = [r["f1_mean"] for r in rows]
    stds = [r.get("f1_std", 0.0) for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, len(methods) * 1.1), 3.2))
    ax.bar(range(len(methods)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods, rotation=30, ha="right")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, Path(path))


def save_rank_uncertainty(rank_stats: dict[str, np.ndarray], truth: LaggedGraph | None,
                          path: str | Path):
    """Mean rank vs rank std scatter, colored by edge truth when available."""
    mean = rank_stats["mean_rank"].ravel()
    std = rank_stats["std_rank"].ravel()
    fig, ax = plt.subplots(figsize=(5, 4))
    if truth is not None:
        labels = truth.to_adjacency().ravel()
        ax.scatter(mean[~labels], std[~labels], s=8, alpha=0.5, label="non-edge")
        ax.scatter(mean[labels], std[labels], s=10, alpha=0.8, label="true edge")
        ax.legend()
    else:
        ax.scatter(mean, std, s=8, alpha=0.6)
    ax.set_xlabel("mean rank (higher = stronger)")
    ax.set_ylabel("rank std")
    fig.tight_layout()
    _save(fig, Path(path))


def write_summary_csv(rows: list[dict], path: str | Path):
    """One row per method x seed plus mean/std aggregate rows per method."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["method", "seed", "precision", "recall", "f1", "shd"]
    methods: dict[str, list[dict]] = {}
    for r in rows:
        methods.setdefault(r["method"], []).append(r)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["method"], r["seed"]] +
                       [_fmt(r.get(c)) for c in cols[2:]])
        for method in methods:
            done = [r for r in methods[method] if r.get("f1") is not None]
            if not done:
                w.writerow([method, "summary"] + ["missing"] * 4)
                continue
            w.writerow([method, "mean"] +
                       [_fmt(float(np.mean([r[c] for r in done]))) for c in cols[2:]])
            w.writerow([method, "std"] +
                       [_fmt(float(np.std([r[c] for r in done]))) for c in cols[2:]])
    return path


def _fmt(v) -> str:
    if v is None:
        return "missing"
    return repr(float(v))


def summary_rows_for_figure(rows: list[dict]) -> list[dict]:
    methods: dict[str, list[float]] = {}
    for r in rows:
        if r.get("f1") is not None:
            methods.setdefault(r["method"], []).append(r["f1"])
    return [{"method": m, "f1_mean": float(np.mean(v)), "f1_std": float(np.std(v))}
            for m, v in methods.items()]
