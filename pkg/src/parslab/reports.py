"""CSV grids and minimal SVG heatmaps.

Heatmap colors come from a 256-entry linear ramp running from dark blue
``#08306b`` (lowest value) to yellow ``#ffe500`` (highest value); channel
``c`` of entry ``k`` is ``round(lo_c + (hi_c - lo_c) * k / 255)``. Values are
binned linearly between the map's own min and max; NaN cells are gray.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

_LO = np.array([0x08, 0x30, 0x6B], dtype=np.float64)
_HI = np.array([0xFF, 0xE5, 0x00], dtype=np.float64)


def color_ramp() -> list[str]:
    k = np.arange(256)[:, None] / 255.0
    rgb = np.rint(_LO + (_HI - _LO) * k).astype(int)
    return [f"#{r:02x}{g:02x}{b:02x}" for r, g, b in rgb]


def svg_heatmap(values: np.ndarray, cell: int = 6, title: str = "") -> str:
    """Render a 2-D array (row 0 at the top) as an SVG grid of rects."""
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    finite = values[np.isfinite(values)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    ramp = color_ramp()
    head = 16 if title else 0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell + head}">'
    ]
    if title:
        parts.append(f'<text x="2" y="12" font-size="11" font-family="monospace">{title}</text>')
    for i in range(rows):
        for j in range(cols):
            v = values[i, j]
            color = "#808080" if not np.isfinite(v) else ramp[int(np.clip((v - lo) / span * 255.0, 0, 255))]
            parts.append(f'<rect x="{j * cell}" y="{i * cell + head}" width="{cell}" height="{cell}" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg_heatmap(path, values, title: str = "") -> None:
    Path(path).write_text(svg_heatmap(values, title=title))


def write_grid_csv(path, points: np.ndarray, values: np.ndarray, value_name: str = "value") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"x{i}" for i in range(points.shape[1])), value_name])
        for p, v in zip(points, values):
            w.writerow([*(repr(float(c)) for c in p), repr(float(v))])


def write_rows_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
