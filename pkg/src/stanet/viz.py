"""SVG rendering of a predicted BEV map: class-colored cells plus motion arrows."""

from __future__ import annotations

from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from .voxelizer import CLASS_NAMES, GridConfig

# fixed per class, indexed by class id
CLASS_COLORS = ("#1b1b1b", "#3b82f6", "#ef4444", "#22c55e", "#eab308")
ARROW_COLOR = "#ffffff"


def render_svg(class_pred: np.ndarray, gate: np.ndarray, motion_gated: np.ndarray,
               grid: GridConfig, cell_px: int = 6, title: Optional[str] = None) -> str:
    """Cells colored by predicted class; one arrow per cell whose gate is open,
    from the cell center to its predicted position at the last horizon step.

    ``gate`` is True where motion was zeroed. Metric x runs left to right and
    metric y bottom to top.
    """
    H, W = class_pred.shape
    res_x, res_y = grid.resolution[0], grid.resolution[1]
    px_per_m = cell_px / res_x
    width, height = H * cell_px, W * cell_px

    def to_px(x, y):
        return ((x - grid.x_range[0]) * px_per_m, height - (y - grid.y_range[0]) * cell_px / res_y)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">']
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    parts.append(f'<rect class="bg" x="0" y="0" width="{width}" height="{height}" '
                 f'fill="{CLASS_COLORS[0]}"/>')
    for i, j in zip(*np.nonzero(class_pred)):
        c = int(class_pred[i, j])
        x, y = i * cell_px, height - (j + 1) * cell_px
        parts.append(f'<rect class="cell {CLASS_NAMES[c]}" x="{x}" y="{y}" width="{cell_px}" '
                     f'height="{cell_px}" fill="{CLASS_COLORS[c]}"/>')

    centers = grid.cell_centers()
    for i, j in zip(*np.nonzero(~gate)):
        cx, cy = centers[i, j]
        dx, dy = motion_gated[-1, i, j]
        x1, y1 = to_px(cx, cy)
        x2, y2 = to_px(cx + dx, cy + dy)
        parts.append(f'<line class="arrow" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" '
                     f'y2="{y2:.2f}" stroke="{ARROW_COLOR}" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def count_arrows(svg: str) -> int:
    return svg.count('class="arrow"')
