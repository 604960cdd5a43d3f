"""Figure rendering for report paths.

Every report-producing pipeline step writes its delimited output first and
then, through these helpers, a PNG of the same data next to it. Rendering is
headless (Agg) and never influences the numbers.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluate import ProjectionDump, ScoreReport, SweepTable


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training_curves(history: Sequence, path) -> None:
    """Train/dev loss plus dev accuracy over epochs."""
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r.train_loss for r in history], marker="o", label="train loss")
    ax_loss.plot(epochs, [r.dev_loss for r in history], marker="s", label="dev loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss per utterance")
    ax_loss.legend()
    ax_acc.plot(epochs, [r.dev_accuracy for r in history], marker="o", color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("dev label accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    _save(fig, path)


def plot_score_report(report: ScoreReport, path) -> None:
    """Stacked substitution/deletion/insertion counts per utterance."""
    uids = [u.uid for u in report.utterances]
    subs = [u.counts.substitutions for u in report.utterances]
    dels = [u.counts.deletions for u in report.utterances]
    ins = [u.counts.insertions for u in report.utterances]
    x = range(len(uids))
    fig, ax = plt.subplots(figsize=(max(6, 0.25 * len(uids)), 3.5))
    ax.bar(x, subs, label="sub")
    ax.bar(x, dels, bottom=subs, label="del")
    ax.bar(x, ins, bottom=[s + d for s, d in zip(subs, dels)], label="ins")
    ax.set_xticks(list(x))
    ax.set_xticklabels(uids, rotation=90, fontsize=5)
    ax.set_ylabel("errors")
    ax.set_title(
        f"{report.split or 'set'} ({report.condition or '?'}): WER {100.0 * report.wer:.2f}%"
    )
    ax.legend()
    _save(fig, path)


def plot_sweep(table: SweepTable, path) -> None:
    """Grouped WER bars: one group per row, one bar per column."""
    rows = sorted({c.row for c in table.cells})
    cols = sorted({c.column for c in table.cells})
    by_key = {(c.row, c.column): c for c in table.cells}
    width = 0.8 / max(len(cols), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(rows)), 3.8))
    for j, col in enumerate(cols):
        xs, ys = [], []
        for i, row in enumerate(rows):
            cell = by_key.get((row, col))
            if cell is None or cell.absent:
                continue
            xs.append(i + j * width)
            ys.append(100.0 * cell.report.wer)
        ax.bar(xs, ys, width=width, label=col)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
    ax.set_xticklabels(rows, rotation=20, ha="right")
    ax.set_ylabel("WER (%)")
    ax.set_title(table.kind)
    ax.legend()
    _save(fig, path)


def plot_projection(dumps: Mapping[str, ProjectionDump], path) -> None:
    """Frame trajectories in the leading principal components, one trace per
    conditioning label; single-component dumps plot against frame index."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for label, dump in dumps.items():
        coords = dump.coordinates
        if coords.shape[1] >= 2:
            ax.plot(coords[:, 0], coords[:, 1], marker=".", linewidth=0.8, label=label)
        else:
            ax.plot(coords[:, 0], marker=".", linewidth=0.8, label=label)
    if any(d.coordinates.shape[1] >= 2 for d in dumps.values()):
        ax.set_xlabel("pc1")
        ax.set_ylabel("pc2")
    else:
        ax.set_xlabel("frame")
        ax.set_ylabel("pc1")
    ratios = next(iter(dumps.values())).variance_ratios if dumps else []
    ax.set_title("encoder states, variance " + "/".join(f"{r:.2f}" for r in ratios))
    ax.legend()
    _save(fig, path)
