"""Figures rendered next to the delimited reports.

Everything draws through the Agg backend straight to files; nothing here
opens a window.
"""

from __future__ import annotations

import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

log = logging.getLogger(__name__)

__all__ = ["accuracy_figure", "timing_figure"]


def accuracy_figure(rows, path, title: str = "") -> None:
    """Bar chart of target accuracy per attack with the across-repeat
    deviation as error bars. rows are summary dicts with attack,
    accuracy_mean, accuracy_std."""
    names = [r["attack"] for r in rows]
    means = [r["accuracy_mean"] for r in rows]
    stds = [r["accuracy_std"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(names), 3.4))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4,
           color="#4878a8", edgecolor="black", linewidth=0.6)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("target accuracy after retraining")
    if title:
        ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    log.info("wrote %s", path)


def timing_figure(rows, path, title: str = "") -> None:
    """Log-log attack time against graph size, one line per attack.
    Timed-out cells are simply absent from their line."""
    by_attack: dict[str, list] = {}
    for r in rows:
        if r["status"] == "ok" and r["median_ms"] is not None:
            by_attack.setdefault(r["attack"], []).append(
                (r["size"], r["median_ms"]))
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    for attack, pts in sorted(by_attack.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=attack)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("nodes")
    ax.set_ylabel("attack time (ms, median)")
    if title:
        ax.set_title(title)
    if by_attack:
        ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    log.info("wrote %s", path)
