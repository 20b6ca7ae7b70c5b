"""Figure rendering for the report command.

Figures are written next to the delimited output with fixed metadata and
dpi, so re-running a report produces byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE_KW = {"dpi": 150, "metadata": {"Software": None}, "bbox_inches": "tight"}


def certified_accuracy_figure(rows: list[dict], path: Path) -> None:
    """One accuracy-vs-radius curve per method row.

    Each row needs ``method``, ``sigma``, and ``certified_accuracy`` mapping
    radius to accuracy.
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for row in rows:
        pairs = sorted((float(r), v) for r, v in row["certified_accuracy"].items())
        radii = [p[0] for p in pairs]
        accs = [p[1] for p in pairs]
        ax.plot(radii, accs, marker="o", markersize=3,
                label=f"{row['method']} (sigma={row['sigma']})")
    ax.set_xlabel("radius")
    ax.set_ylabel("certified accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def mask_ratio_figure(curves: dict[str, list[float]], path: Path) -> None:
    """Mask-active ratio per epoch for each fine-tuning run."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for method, ratios in sorted(curves.items()):
        ax.plot(range(len(ratios)), ratios, marker="o", markersize=3, label=method)
    ax.set_xlabel("epoch")
    ax.set_ylabel("fraction of samples with all copies kept")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
