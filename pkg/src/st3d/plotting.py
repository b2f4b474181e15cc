"""Per-spot SVG heatmaps and matplotlib report figures."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import UsageError
from .records import SampleStack

# viridis sampled at nine evenly spaced stops; interpolated to 256 entries
_STOPS = (
    (68, 1, 84), (72, 40, 120), (62, 73, 137), (49, 104, 142), (38, 130, 142),
    (31, 158, 137), (53, 183, 121), (110, 206, 88), (253, 231, 37),
)


def _build_table() -> tuple:
    stops = np.array(_STOPS, dtype=np.float64)
    pos = np.linspace(0.0, 1.0, len(stops))
    t = np.linspace(0.0, 1.0, 256)
    rgb = np.stack([np.interp(t, pos, stops[:, c]) for c in range(3)], axis=1)
    return tuple("#%02x%02x%02x" % tuple(int(round(v)) for v in row) for row in rgb)


COLOR_TABLE = _build_table()
MID_INDEX = 128


def color_indices(values) -> np.ndarray:
    """Map values linearly from ``[min, max]`` onto ``0..255``; a constant
    vector maps to the middle entry."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, MID_INDEX, dtype=np.int64)
    return np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.int64)


def render_heatmap_svg(centers, radii, values, title: str = "", margin: float = 20.0) -> str:
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (len(centers),))
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(centers) == 0:
        raise UsageError("heatmap needs at least one spot")
    if len(values) != len(centers):
        raise UsageError(f"{len(values)} values for {len(centers)} spots")
    if not np.all(np.isfinite(values)):
        raise UsageError("heatmap values must be finite")
    idx = color_indices(values)
    x0 = float(np.min(centers[:, 0] - radii)) - margin
    y0 = float(np.min(centers[:, 1] - radii)) - margin
    w = float(np.max(centers[:, 0] + radii)) + margin - x0
    h = float(np.max(centers[:, 1] + radii)) + margin - y0
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.3f} {y0:.3f} {w:.3f} {h:.3f}" '
        f'width="{w:.0f}" height="{h:.0f}">',
    ]
    if title:
        lines.append(f"<title>{_escape(title)}</title>")
    lines.append(f'<rect x="{x0:.3f}" y="{y0:.3f}" width="{w:.3f}" height="{h:.3f}" fill="#ffffff"/>')
    for (cx, cy), r, k in zip(centers, radii, idx):
        lines.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="{r:.3f}" fill="{COLOR_TABLE[k]}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def export_heatmap(stack: SampleStack, values, gene_name: str, path, layer=None) -> Path:
    """Write one circle per spot at its aligned coordinates.

    ``layer`` restricts the plot to one layer index; ``values`` then still
    holds one entry per spot of the whole stack.
    """
    if stack.n_spots == 0:
        raise UsageError("heatmap needs at least one spot")
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) != stack.n_spots:
        raise UsageError(f"{len(values)} values for {stack.n_spots} spots")
    rows = np.arange(stack.n_spots) if layer is None else stack.layer_rows(layer)
    if len(rows) == 0:
        raise UsageError(f"sample {stack.sample_id!r} has no spots on layer {layer}")
    title = f"{stack.sample_id} {gene_name}" + ("" if layer is None else f" layer {layer}")
    svg = render_heatmap_svg(stack.aligned_centers[rows], stack.aligned_radii[rows], values[rows], title)
    path = Path(path)
    path.write_text(svg)
    return path


# ---------------------------------------------------------------------------
# matplotlib figures for evaluation reports


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_fold_metrics(report, path) -> Path:
    """Bar chart of per-fold PCC, MSE and MAE for one run."""
    plt = _pyplot()
    folds = report.folds
    x = np.arange(len(folds))
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, key in zip(axes, ("pcc", "mse", "mae")):
        ax.bar(x, [getattr(f, key) for f in folds], color="#31688e")
        ax.set_xticks(x, [str(f.fold_id) for f in folds])
        ax.set_xlabel("fold")
        ax.set_title(key.upper())
    fig.suptitle(f"{report.method}, known ratio {report.known_ratio:g}")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_sweep(series: dict, path, metric: str = "pcc") -> Path:
    """Line plot of an aggregate metric against known ratio.

    ``series`` maps a label to ``{ratio: RunReport}``.
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, reports in series.items():
        rs = sorted(reports)
        ax.plot(rs, [reports[r].aggregate()[metric] for r in rs], marker="o", label=label)
    ax.set_xlabel("known ratio")
    ax.set_ylabel(f"mean {metric.upper()}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
