"""Figures written next to the CLI's delimited reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import BleuReport, LatencyRecord, average_lagging  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_latency(records: Sequence[LatencyRecord], path, labels: Sequence[str] | None = None,
                 frame_ms: float | None = None) -> Path:
    """Delay staircase per utterance against the ideal proportional schedule."""
    scale = frame_ms / 1000.0 if frame_ms else 1.0
    unit = "s" if frame_ms else "frames"
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for k, rec in enumerate(records):
            if not rec.delays:
                continue
            idx = range(1, len(rec.delays) + 1)
            name = labels[k] if labels else f"utt {k}"
            line, = ax.step(idx, [d * scale for d in rec.delays], where="post",
                            label=f"{name} (AL {average_lagging(rec) * scale:.2f})")
            ideal = [i * rec.source_len / rec.target_len * scale for i in range(len(rec.delays))]
            ax.plot(idx, ideal, ls=":", color=line.get_color(), lw=0.8)
        ax.set_xlabel("target token")
        ax.set_ylabel(f"source read ({unit})")
        if len(records) <= 8:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_bleu(report: BleuReport, path) -> Path:
    """Modified n-gram precisions with BLEU and brevity penalty in the title."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        orders = [f"{n}-gram" for n in range(1, len(report.precisions) + 1)]
        ax.bar(orders, report.precisions, color="0.55")
        ax.set_ylim(0, 100)
        ax.set_ylabel("precision (%)")
        ax.set_title(f"BLEU {report.bleu:.2f}, BP {report.brevity_penalty:.3f}")
        return _save(fig, path)


def plot_stream_events(events, path, title: str | None = None) -> Path:
    """READ/WRITE timeline of one streaming session."""
    frames, writes = 0, []
    for e in events:
        if e.type == "READ":
            frames += e.frames
        else:
            writes.append((frames, e.token))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.6))
        ax.step([0] + [f for f, _ in writes], range(len(writes) + 1), where="post", color="k")
        for i, (f, tok) in enumerate(writes, 1):
            ax.annotate(tok, (f, i), textcoords="offset points", xytext=(3, -3), fontsize=7)
        ax.set_xlim(0, max(frames, 1))
        ax.set_xlabel("frames read")
        ax.set_ylabel("tokens written")
        if title:
            ax.set_title(title)
        return _save(fig, path)
