"""Figures written next to the CSV/JSON outputs (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def roc_figure(points: Sequence[tuple], auc: float, path: str | Path, label: str = "model") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([p[1] for p in points], [p[2] for p in points], label=f"{label} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], linestyle=":", color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    return _save(fig, path)


def loss_figure(log: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [e["epoch"] for e in log]
    for key in ("contrastive", "regression", "total"):
        if key in log[0]:
            ax.plot(epochs, [e[key] for e in log], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def concordance_figure(rows: Sequence[dict], path: str | Path) -> Path:
    pairs = [(r["fc_ag"], r["fc_ap"]) for r in rows
             if r.get("fc_ap") is not None and r.get("fc_ag") is not None]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter([p[0] for p in pairs], [p[1] for p in pairs], s=10)
    ax.plot([0, 0.75], [0, 0.75], linestyle=":", color="grey")
    ax.set_xlabel("FC-score (A, G)")
    ax.set_ylabel("FC-score (A, P)")
    return _save(fig, path)


def metric_bars(summary: dict, metrics: Sequence[str], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    labels, values = [], []
    for m in metrics:
        labels += [f"{m} (A,G)", f"{m} (C,G)"]
        values += [summary[f"{m}_ag"], summary[f"{m}_cg"]]
    ax.bar(range(len(values)), values, color=["tab:grey", "tab:green"] * len(metrics))
    ax.set_xticks(range(len(values)), labels)
    ax.set_ylim(0, 1)
    return _save(fig, path)
