"""Hand-rolled SVG rendering: byte-identical output for identical input.

No plotting library is used on purpose; report files must be reproducible
checksum-for-checksum, and the figures involved (cell grids, polylines,
bars) do not need more than this.
"""

from __future__ import annotations

import io

import numpy as np


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _diverging_color(u: float) -> str:
    """Blue -> white -> red over u in [0, 1]."""
    u = min(max(u, 0.0), 1.0)
    if u < 0.5:
        w = u / 0.5
        r, g, b = int(round(40 + 215 * w)), int(round(60 + 195 * w)), 255
    else:
        w = (u - 0.5) / 0.5
        r, g, b = 255, int(round(255 - 195 * w)), int(round(255 - 215 * w))
    return f"#{r:02x}{g:02x}{b:02x}"


def _sequential_color(u: float) -> str:
    """Dark violet -> yellow over u in [0, 1]."""
    u = min(max(u, 0.0), 1.0)
    r = int(round(50 + 205 * u))
    g = int(round(20 + 215 * u))
    b = int(round(90 + 40 * (1 - u)))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(values: np.ndarray, row_labels=None, col_labels=None,
                title: str = "", vmin: float | None = None,
                vmax: float | None = None, diverging: bool = False,
                cell: int = 8) -> str:
    """Cell-grid heatmap.  Degenerate ranges map every cell to mid-scale."""
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    lo = float(np.min(values)) if vmin is None else vmin
    hi = float(np.max(values)) if vmax is None else vmax
    margin_left = 46 if row_labels is not None else 8
    margin_top = 22 if title else 8
    margin_bottom = 40 if col_labels is not None else 8
    width = margin_left + cols * cell + 8
    height = margin_top + rows * cell + margin_bottom

    out = io.StringIO()
    out.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n')
    if title:
        out.write(f'<text x="{margin_left}" y="14" font-size="12" '
                  f'font-family="monospace">{title}</text>\n')
    span = hi - lo
    for i in range(rows):
        for j in range(cols):
            u = 0.5 if span <= 0 else (values[i, j] - lo) / span
            color = _diverging_color(u) if diverging else _sequential_color(u)
            x = margin_left + j * cell
            y = margin_top + i * cell
            out.write(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                      f'fill="{color}"/>\n')
    if row_labels is not None:
        for i, lab in enumerate(row_labels):
            y = margin_top + i * cell + cell - 1
            out.write(f'<text x="2" y="{y}" font-size="{max(cell - 2, 4)}" '
                      f'font-family="monospace">{lab}</text>\n')
    if col_labels is not None:
        for j, lab in enumerate(col_labels):
            x = margin_left + j * cell + cell - 1
            y = margin_top + rows * cell + 4
            out.write(f'<text x="{x}" y="{y}" font-size="{max(cell - 2, 4)}" '
                      f'font-family="monospace" transform="rotate(90 {x} {y})">{lab}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()


def lineplot_svg(series: dict[str, np.ndarray], title: str = "",
                 width: int = 640, height: int = 160) -> str:
    """Stacked polyline panels, one per named series, shared x axis."""
    out = io.StringIO()
    panel_h = height
    total_h = panel_h * len(series) + 20
    out.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" '
        f'viewBox="0 0 {width} {total_h}">\n')
    if title:
        out.write(f'<text x="8" y="14" font-size="12" font-family="monospace">{title}</text>\n')
    top = 20
    for name, y in series.items():
        y = np.asarray(y, dtype=np.float64)
        lo, hi = float(np.min(y)), float(np.max(y))
        span = hi - lo if hi > lo else 1.0
        xs = np.linspace(8, width - 8, y.size)
        ys = top + 14 + (panel_h - 24) * (1.0 - (y - lo) / span)
        points = " ".join(f"{_fmt(x)},{_fmt(v)}" for x, v in zip(xs, ys))
        out.write(f'<text x="8" y="{top + 10}" font-size="10" '
                  f'font-family="monospace">{name}</text>\n')
        out.write(f'<polyline fill="none" stroke="#1f4e9c" stroke-width="1" '
                  f'points="{points}"/>\n')
        top += panel_h
    out.write("</svg>\n")
    return out.getvalue()


def barchart_svg(labels: list[str], values: list[float], title: str = "",
                 vmax: float = 100.0, width: int = 480, height: int = 220) -> str:
    out = io.StringIO()
    out.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n')
    if title:
        out.write(f'<text x="8" y="14" font-size="12" font-family="monospace">{title}</text>\n')
    n = max(len(values), 1)
    slot = (width - 16) / n
    base = height - 30
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = 0.0 if vmax <= 0 else (base - 24) * min(max(v / vmax, 0.0), 1.0)
        x = 8 + i * slot
        out.write(f'<rect x="{_fmt(x + slot * 0.15)}" y="{_fmt(base - h)}" '
                  f'width="{_fmt(slot * 0.7)}" height="{_fmt(h)}" fill="#2c7fb8"/>\n')
        out.write(f'<text x="{_fmt(x + slot * 0.5)}" y="{base + 12}" font-size="10" '
                  f'text-anchor="middle" font-family="monospace">{lab}</text>\n')
        out.write(f'<text x="{_fmt(x + slot * 0.5)}" y="{_fmt(base - h - 4)}" font-size="10" '
                  f'text-anchor="middle" font-family="monospace">{_fmt(v)}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()
