"""Minimal SVG heatmaps for score grids (diverging scale centred at 0)."""

from __future__ import annotations

import math
from html import escape
from pathlib import Path

from .patching import ScoreGrid

CELL = 28
LEFT = 60
TOP = 40


def _color(v: float, vlim: float) -> str:
    if not math.isfinite(v):
        return "#cccccc"
    t = max(-1.0, min(1.0, v / vlim)) if vlim > 0 else 0.0
    # positive -> blue, negative -> red, 0 -> white
    if t >= 0:
        r, g, b = 255 - 222 * t, 255 - 153 * t, 255 - 75 * t
    else:
        t = -t
        r, g, b = 255 - 40 * t, 255 - 200 * t, 255 - 200 * t
    return f"#{int(round(r)):02x}{int(round(g)):02x}{int(round(b)):02x}"


def grid_svg(grid: ScoreGrid, vlim: float = 1.0, title: str = "", config_hash: str = "") -> str:
    n_rows, n_cols = grid.shape
    width = LEFT + n_cols * CELL + 90
    height = TOP + n_rows * CELL + 70
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">',
    ]
    if config_hash:
        out.append(f"<!-- config_hash={config_hash} -->")
    if title:
        out.append(f'<text x="{LEFT}" y="14" font-size="12">{escape(title)}</text>')
    for j, c in enumerate(grid.cols):
        x = LEFT + j * CELL + CELL / 2
        out.append(f'<text x="{x}" y="{TOP - 4}" text-anchor="end" transform="rotate(-45 {x} {TOP - 4})">{escape(str(c))}</text>')
    for i, r in enumerate(grid.rows):
        y = TOP + i * CELL
        out.append(f'<text x="{LEFT - 4}" y="{y + CELL / 2 + 3}" text-anchor="end">{grid.row_name} {r}</text>')
        for j in range(n_cols):
            v = float(grid.values[i, j])
            label = "nan" if not math.isfinite(v) else f"{v:.4f}"
            out.append(
                f'<rect x="{LEFT + j * CELL}" y="{y}" width="{CELL}" height="{CELL}" fill="{_color(v, vlim)}">'
                f"<title>{escape(str(r))},{escape(str(grid.cols[j]))}: {label}</title></rect>"
            )
    # colour bar
    bx = LEFT + n_cols * CELL + 20
    steps = 20
    bar_h = max(n_rows * CELL, 100)
    for s in range(steps):
        v = vlim - (2 * vlim) * s / (steps - 1)
        out.append(f'<rect x="{bx}" y="{TOP + s * bar_h / steps}" width="12" height="{bar_h / steps + 0.5}" fill="{_color(v, vlim)}"/>')
    out.append(f'<text x="{bx + 16}" y="{TOP + 8}">{vlim:g}</text>')
    out.append(f'<text x="{bx + 16}" y="{TOP + bar_h / 2 + 3}">0</text>')
    out.append(f'<text x="{bx + 16}" y="{TOP + bar_h}">{-vlim:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(grid: ScoreGrid, path: str | Path, vlim: float = 1.0, title: str = "", config_hash: str = "") -> Path:
    path = Path(path)
    path.write_text(grid_svg(grid, vlim, title, config_hash))
    return path
