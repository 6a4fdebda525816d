"""SVG and CSV artifacts: MI bar charts and 2-D curvature heatmaps."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..flows import FlowStack  # noqa: E402
from ..geometry import GeodesicResult, curvature_grid  # noqa: E402

log = logging.getLogger(__name__)


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def best_dev_row(rows: list[dict[str, str]]) -> dict[str, str]:
    """Row with the lowest dev bound, preferring main-phase epochs."""
    main = [r for r in rows if r.get("phase", "main") == "main"] or rows
    return min(main, key=lambda r: float(r["nll"]))


def mi_bars(metrics: dict[str, str | Path]) -> dict[str, tuple[float, float]]:
    """Model label -> (MI, standard error) at each run's best-dev epoch."""
    out = {}
    for label, path in metrics.items():
        row = best_dev_row(read_metrics(path))
        se = float(row["mi_se"]) if row.get("mi_se") else 0.0
        out[label] = (float(row["mi"]), se)
    return out


def plot_mi_bars(metrics: dict[str, str | Path], out_prefix) -> dict[str, tuple[float, float]]:
    """One bar per model, written as ``<prefix>.svg`` and ``<prefix>.csv``."""
    bars = mi_bars(metrics)
    out_prefix = Path(out_prefix)
    with open(out_prefix.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "mi", "mi_se"])
        for label, (mi, se) in bars.items():
            writer.writerow([label, repr(mi), repr(se)])
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(bars), 3.2))
    labels = list(bars)
    ax.bar(range(len(labels)), [bars[k][0] for k in labels], yerr=[bars[k][1] for k in labels],
           color="#4c72b0", capsize=4)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylabel("mutual information (nats)")
    fig.tight_layout()
    fig.savefig(out_prefix.with_suffix(".svg"))
    plt.close(fig)
    return bars


def plot_curvature(s: FlowStack, out_prefix, extent: float = 3.0, resolution: int = 60,
                   geodesics: list[GeodesicResult] | None = None) -> np.ndarray | None:
    """Heatmap of ``sqrt(det G)`` over a square grid, with optional geodesics.

    Returns the grid, or ``None`` (with a notice) when the latent space is not 2-D.
    """
    if not s.flows or s.flows[0].dim != 2:
        log.warning("curvature heatmap skipped: latent dimension is not 2")
        return None
    xs = np.linspace(-extent, extent, resolution)
    grid = curvature_grid(s, xs, xs)
    out_prefix = Path(out_prefix)
    with open(out_prefix.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "sqrt_det_g"])
        for i, y in enumerate(xs):
            for j, x in enumerate(xs):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(grid[i, j]))])
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(grid, origin="lower", extent=(-extent, extent, -extent, extent), cmap="viridis")
    fig.colorbar(im, ax=ax, label="sqrt det G")
    for g in geodesics or []:
        ax.plot(g.curve.points[:, 0], g.curve.points[:, 1], color="white", lw=1.5)
        ax.plot(*g.curve.points[[0, -1]].T, "o", color="white", ms=3)
    fig.tight_layout()
    fig.savefig(out_prefix.with_suffix(".svg"))
    plt.close(fig)
    return grid
