"""Matplotlib renderings of discovery artifacts.

Three figure kinds: the mixed graph with its endpoint marks drawn as
glyphs (arrowhead, open circle, plain tail), per-iteration loop statistics,
and the evaluation metric bundle.  Everything renders headless onto the
Agg backend and writes PNG files.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .graph import ARROW, CIRCLE, MixedGraph

_NODE_RADIUS = 0.085
_GLYPH_OFFSET = 0.035  # circle glyph distance past the node boundary


def _layout(nodes) -> dict:
    """Fixed circular layout in node order; deterministic across runs."""
    n = len(nodes)
    pos = {}
    for i, name in enumerate(nodes):
        angle = math.pi / 2 - 2 * math.pi * i / max(n, 1)
        pos[name] = (math.cos(angle), math.sin(angle))
    return pos


def _draw_endpoint(ax, start, end, mark):
    """Endpoint glyph at `end` for an edge arriving from `start`."""
    sx, sy = start
    ex, ey = end
    dx, dy = ex - sx, ey - sy
    dist = math.hypot(dx, dy) or 1.0
    ux, uy = dx / dist, dy / dist
    tip = (ex - ux * _NODE_RADIUS, ey - uy * _NODE_RADIUS)
    if mark == ARROW:
        base = (tip[0] - ux * 0.07, tip[1] - uy * 0.07)
        ax.annotate("", xy=tip, xytext=base,
                    arrowprops={"arrowstyle": "-|>", "color": "black",
                                "shrinkA": 0, "shrinkB": 0, "mutation_scale": 16})
    elif mark == CIRCLE:
        c = (tip[0] - ux * _GLYPH_OFFSET, tip[1] - uy * _GLYPH_OFFSET)
        ax.add_patch(plt.Circle(c, 0.028, facecolor="white", edgecolor="black",
                                zorder=4, linewidth=1.2))
    # TAIL draws nothing: the plain line end is the glyph


def plot_graph(g: MixedGraph, path, title: str | None = None) -> Path:
    """Render the graph with endpoint-mark glyphs to a PNG file."""
    path = Path(path)
    pos = _layout(g.nodes)
    fig, ax = plt.subplots(figsize=(6.5, 6.5))
    for a, b in g.edges():
        pa, pb = pos[a], pos[b]
        ax.plot([pa[0], pb[0]], [pa[1], pb[1]], color="black", linewidth=1.1, zorder=1)
        _draw_endpoint(ax, pa, pb, g.mark_at(a, b))
        _draw_endpoint(ax, pb, pa, g.mark_at(b, a))
    for name, (x, y) in pos.items():
        ax.add_patch(plt.Circle((x, y), _NODE_RADIUS, facecolor="#eef",
                                edgecolor="black", zorder=3))
        ax.text(x, y, name, ha="center", va="center", fontsize=8, zorder=5)
    ax.set_xlim(-1.35, 1.35)
    ax.set_ylim(-1.35, 1.35)
    ax.set_aspect("equal")
    ax.axis("off")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_iteration_stats(report: dict, path) -> Path:
    """Circle counts and gate outcomes per iteration from a run-report dict."""
    path = Path(path)
    iterations = report.get("iterations", [])
    idx = [it["index"] for it in iterations]
    circles = [it["circle_count"] for it in iterations]
    gates = [it["gate"] for it in iterations]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))

    ax1.plot(idx, circles, marker="o", color="black")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("circle endpoints")
    ax1.set_title("residual ambiguity")
    ax1.set_xticks(idx)
    ax1.grid(alpha=0.3)

    keys = ["accepted", "rejected_semantic", "rejected_causal", "embed_failures"]
    colors = ["#4a7", "#d95", "#c55", "#888"]
    bottom = np.zeros(len(idx))
    for key, color in zip(keys, colors):
        vals = np.array([g.get(key, 0) for g in gates], dtype=float)
        ax2.bar(idx, vals, bottom=bottom, label=key.replace("_", " "), color=color)
        bottom += vals
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("counterfactual candidates")
    ax2.set_title("gate outcomes")
    ax2.set_xticks(idx)
    if idx:
        ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(metrics: dict, path) -> Path:
    """Bar chart of the metric bundle: unit-interval scores plus distances."""
    path = Path(path)
    ratio_keys = [k for k in ("np", "nr", "nf", "ap", "ar", "af") if k in metrics]
    count_keys = [k for k in ("shd", "eshd") if k in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.8),
                                   gridspec_kw={"width_ratios": [3, 1]})
    vals = [metrics[k] for k in ratio_keys]
    ax1.bar(range(len(ratio_keys)), vals, color="#57a")
    ax1.set_xticks(range(len(ratio_keys)))
    ax1.set_xticklabels([k.upper() for k in ratio_keys])
    ax1.set_ylim(0, 1.05)
    ax1.set_title("precision / recall / F1")
    for i, v in enumerate(vals):
        ax1.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=8)

    cvals = [metrics[k] for k in count_keys]
    ax2.bar(range(len(count_keys)), cvals, color="#a75")
    ax2.set_xticks(range(len(count_keys)))
    ax2.set_xticklabels([k.upper() for k in count_keys])
    ax2.set_title("structural distance")
    for i, v in enumerate(cvals):
        ax2.text(i, v + 0.02, str(v), ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
