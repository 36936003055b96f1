"""Report figures: metric bars with standard-error whiskers, pooled ROC curves, loss curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import COLUMN_TITLES, METRIC_NAMES, roc_points  # noqa: E402


def savefig(fig, path, dpi=120):
    """Save and close a figure."""
    fig.savefig(path, bbox_inches="tight", dpi=dpi)
    plt.close(fig)


def metric_bars(aggregates: dict, path) -> Path:
    variants = list(aggregates)
    x = np.arange(len(METRIC_NAMES))
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(9, 4))
    for i, v in enumerate(variants):
        m = aggregates[v]["metrics"]
        means = [m[k]["mean"] if m[k]["mean"] is not None else np.nan for k in METRIC_NAMES]
        ses = [m[k]["se"] if m[k]["se"] is not None else 0.0 for k in METRIC_NAMES]
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, means, width, yerr=ses, capsize=2, label=v)
    ax.set_xticks(x)
    ax.set_xticklabels(COLUMN_TITLES)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean ± s.e.")
    ax.legend(fontsize="small", ncol=min(len(variants), 5), loc="lower center", bbox_to_anchor=(0.5, 1.0))
    path = Path(path)
    savefig(fig, path)
    return path


def pooled_roc(runs: list[dict]) -> dict[str, list[tuple[float, float, float]]]:
    """ROC points per variant from test predictions pooled over every fold and repetition."""
    by_variant: dict[str, tuple[list, list]] = {}
    for r in runs:
        if "probs" not in r:
            continue
        p, y = by_variant.setdefault(r["variant"], ([], []))
        p.extend(r["probs"])
        y.extend(r["labels"])
    return {v: roc_points(p, y) for v, (p, y) in by_variant.items() if len(set(y)) == 2}


def roc_curves(curves: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for v, pts in curves.items():
        fpr = [p[1] for p in pts] + [1.0]
        tpr = [p[2] for p in pts] + [1.0]
        ax.plot(fpr, tpr, drawstyle="steps-post", label=v)
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_aspect("equal")
    ax.legend(fontsize="small", loc="lower right")
    path = Path(path)
    savefig(fig, path)
    return path


def loss_curve(losses, best_epoch: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(losses)), losses, lw=1.2)
    ax.axvline(best_epoch, color="C3", lw=0.8, ls=":")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    path = Path(path)
    savefig(fig, path)
    return path


def write_roc_csv(curves: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,threshold,fpr,tpr\n")
        for v, pts in curves.items():
            for t, fpr, tpr in pts:
                fh.write(f"{v},{t!r},{fpr!r},{tpr!r}\n")
    return path
