"""Report figures rendered to PNG next to the CSV outputs (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.interpolation": "nearest",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(rows, best, path) -> Path:
    """Overall accuracy against the fast-model weight."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        wa = [r[0] for r in rows]
        ax.plot(wa, [r[2] for r in rows], "o-", color="tab:blue")
        ax.axvline(best[0], ls=":", color="grey")
        ax.set_xlabel("weight of fast model (slow = 1 - w)")
        ax.set_ylabel("overall accuracy")
        ax.set_title(f"weight sweep, best {best[0]:.1f}:{best[1]:.1f} (OA {best[2]:.3f})")
        return _save(fig, path)


def plot_confusion(cm, path, title: str = "") -> Path:
    """Row-normalised confusion heatmap with raw counts annotated."""
    counts = cm.counts
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    n = cm.n_classes
    with plt.rc_context(STYLE):
        side = max(3.5, 0.45 * n + 1.5)
        fig, ax = plt.subplots(figsize=(side, side))
        ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        ax.set_xticks(range(n), cm.class_names, rotation=60, ha="right")
        ax.set_yticks(range(n), cm.class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if n <= 20:
            for t in range(n):
                for p in range(n):
                    ax.text(p, t, str(counts[t, p]), ha="center", va="center", fontsize=7,
                            color="white" if norm[t, p] > 0.5 else "black")
        ax.set_title(title)
        return _save(fig, path)


def plot_accuracy_vs_time(reports, path) -> Path:
    """Holdout OA of each increment's active model against its total training time."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        t = [r.training_total_seconds for r in reports]
        oa = [r.oa for r in reports]
        ax.plot(t, oa, "o-", color="tab:green")
        for r in reports:
            ax.annotate(r.model, (r.training_total_seconds, r.oa), textcoords="offset points", xytext=(4, 4), fontsize=8)
        ax.set_xlabel("training time of active models (s)")
        ax.set_ylabel("holdout OA")
        return _save(fig, path)


def plot_training_curves(histories: dict, path) -> Path | None:
    """Validation accuracy per epoch for every training action."""
    if not histories:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name in sorted(histories):
            h = histories[name]
            ax.plot([e.epoch for e in h.epochs], [e.val_accuracy for e in h.epochs], label=name,
                    ls="-" if name.startswith("fast") else "--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation accuracy")
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def render_run(result, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = [plot_accuracy_vs_time(result.reports, out / "accuracy_vs_time.png")]
    for r in result.reports:
        paths.append(plot_confusion(result.confusions[r.model], out / f"confusion_{r.model}.png", f"{r.model} ({r.increment})"))
    curves = plot_training_curves(result.histories, out / "training_curves.png")
    if curves is not None:
        paths.append(curves)
    return paths
