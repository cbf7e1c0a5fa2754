"""Figure rendering for synthesis dumps and evaluation reports.

Everything draws through the Agg backend and writes PNG files next to
the text/delimited outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _show_mel(ax, mel, title=None):
    ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", interpolation="none")
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")


def save_mel_figure(mel, path, title=None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    _show_mel(ax, mel, title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_step_grid(steps, path, reference=None) -> Path:
    """One panel per reverse step (noise on the left, final mel on the
    right), optionally with the reference mel appended."""
    panels = list(steps) + ([reference] if reference is not None else [])
    labels = [f"x_{len(steps) - 1 - i}" for i in range(len(steps))]
    if reference is not None:
        labels.append("reference")
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    if len(panels) == 1:
        axes = [axes]
    for ax, mel, label in zip(axes, panels, labels):
        _show_mel(ax, mel, label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_mel_comparison(ref_mel, gen_mel, path, title="") -> Path:
    fig, axes = plt.subplots(2, 1, figsize=(6, 5))
    _show_mel(axes[0], ref_mel, f"reference {title}".strip())
    _show_mel(axes[1], gen_mel, f"generated {title}".strip())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_metrics_figure(per_utterance: dict, means: dict, path) -> Path:
    """Per-utterance bars with the corpus mean line, one panel per metric."""
    metrics = [m for m in means if means[m] is not None]
    if not metrics:
        metrics = list(means)
    fig, axes = plt.subplots(len(metrics), 1, figsize=(7, 2.2 * max(1, len(metrics))))
    if len(metrics) == 1:
        axes = [axes]
    utt_ids = sorted(per_utterance)
    for ax, metric in zip(axes, metrics):
        values = [per_utterance[u].get(metric) for u in utt_ids]
        xs = np.arange(len(utt_ids))
        ys = [v if v is not None else np.nan for v in values]
        ax.bar(xs, ys, color="#4878a8")
        if means.get(metric) is not None:
            ax.axhline(means[metric], color="#a84848", linewidth=1,
                       label=f"mean {means[metric]:.4g}")
            ax.legend(fontsize=8)
        ax.set_ylabel(metric)
        ax.set_xticks(xs)
        ax.set_xticklabels(utt_ids, rotation=60, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
