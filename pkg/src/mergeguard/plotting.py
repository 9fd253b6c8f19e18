"""Matplotlib figures for experiment reports (rendered off-screen to PNG)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_phases(report, path):
    """Test accuracy and ASR before and after the defense."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    labels = ["test acc", "ASR"]
    before = [report.trojaned.test_acc, report.trojaned.asr]
    after = [report.defended.test_acc, report.defended.asr]
    xs = range(len(labels))
    ax.bar([x - 0.2 for x in xs], before, width=0.4, label="trojaned", color="#b44")
    ax.bar([x + 0.2 for x in xs], after, width=0.4, label="defended", color="#48a")
    ax.set_xticks(list(xs), labels)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"{report.attack} / {report.method}")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_alpha_history(report, path):
    """Per-epoch linearity coefficient of each wrapped block."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    hist = report.alpha_history
    if hist and hist[0]:
        for j in range(len(hist[0])):
            ax.plot(range(1, len(hist) + 1), [row[j] for row in hist], marker=".", label=f"block {j}")
        ax.legend(frameon=False)
    threshold = report.config.get("alpha_threshold")
    if threshold is not None:
        ax.axhline(threshold, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("alpha")
    ax.set_ylim(-0.02, 1.02)
    return _save(fig, path)


def plot_sweep(report, path):
    """Accuracy against ASR for every learning rate tried; the chosen one is ringed."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for c in report.sweep:
        chosen = c["learning_rate"] == report.selected_learning_rate
        ax.scatter(c["asr"], c["test_acc"], s=60 if chosen else 25,
                   edgecolors="k" if chosen else "none", color="#48a")
        ax.annotate(f"{c['learning_rate']:g}", (c["asr"], c["test_acc"]), fontsize=7,
                    xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("ASR")
    ax.set_ylabel("test acc")
    return _save(fig, path)


def render_figures(report, out_dir):
    out = Path(out_dir)
    paths = [plot_phases(report, out / "phases.png"), plot_sweep(report, out / "sweep.png")]
    if report.alpha_history:
        paths.append(plot_alpha_history(report, out / "alpha.png"))
    return paths
