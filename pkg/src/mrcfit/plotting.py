"""Dependency-free SVG line charts.

Output is a pure function of the input series: fixed canvas, fixed palette,
fixed float formatting.  Identical data yields byte-identical files, which
is what makes plots diffable across reruns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DimensionMismatch

CANVAS_W = 800
CANVAS_H = 500
_MARGIN_L = 70
_MARGIN_R = 160
_MARGIN_T = 40
_MARGIN_B = 50
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2")


@dataclass(frozen=True)
class Series:
    name: str
    points: tuple[tuple[float, float], ...]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_values(lo: float, hi: float, target: int = 5) -> list[float]:
    """Round tick positions covering [lo, hi]; 1/2/5 progression."""
    if hi <= lo:
        return [lo]
    raw_step = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw_step))
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if raw_step <= step:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < step * 1e-9 else v)
        v += step
    return ticks


def _label(v: float) -> str:
    if v == int(v) and abs(v) < 1e7:
        return str(int(v))
    return f"{v:.6g}"


def render_line_chart(series: list[Series] | tuple[Series, ...], title: str,
                      x_label: str, y_label: str) -> str:
    """SVG text for one chart; one polyline per series, legend on the right."""
    if not series:
        raise DimensionMismatch("no series to plot")
    xs = [x for s in series for x, _ in s.points]
    ys = [y for s in series for _, y in s.points]
    if not xs:
        raise DimensionMismatch("series contain no points")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    plot_w = CANVAS_W - _MARGIN_L - _MARGIN_R
    plot_h = CANVAS_H - _MARGIN_T - _MARGIN_B

    def to_px(x: float, y: float) -> tuple[float, float]:
        px = _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w
        py = _MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h
        return px, py

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" height="{CANVAS_H}" '
        f'viewBox="0 0 {CANVAS_W} {CANVAS_H}">',
        f'<rect width="{CANVAS_W}" height="{CANVAS_H}" fill="#ffffff"/>',
        f'<text x="{CANVAS_W // 2}" y="24" text-anchor="middle" '
        f'font-family="monospace" font-size="16">{title}</text>',
    ]
    axis_y = _MARGIN_T + plot_h
    parts.append(f'<line x1="{_MARGIN_L}" y1="{axis_y}" x2="{_MARGIN_L + plot_w}" '
                 f'y2="{axis_y}" stroke="#000000"/>')
    parts.append(f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
                 f'y2="{axis_y}" stroke="#000000"/>')
    for tx in _tick_values(x_lo, x_hi):
        px, _ = to_px(tx, y_lo)
        parts.append(f'<line x1="{_fmt(px)}" y1="{axis_y}" x2="{_fmt(px)}" '
                     f'y2="{axis_y + 5}" stroke="#000000"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{axis_y + 20}" text-anchor="middle" '
                     f'font-family="monospace" font-size="11">{_label(tx)}</text>')
    for ty in _tick_values(y_lo, y_hi):
        _, py = to_px(x_lo, ty)
        parts.append(f'<line x1="{_MARGIN_L - 5}" y1="{_fmt(py)}" x2="{_MARGIN_L}" '
                     f'y2="{_fmt(py)}" stroke="#000000"/>')
        parts.append(f'<text x="{_MARGIN_L - 8}" y="{_fmt(py)}" text-anchor="end" '
                     f'dominant-baseline="middle" font-family="monospace" '
                     f'font-size="11">{_label(ty)}</text>')
    parts.append(f'<text x="{_MARGIN_L + plot_w // 2}" y="{CANVAS_H - 10}" '
                 f'text-anchor="middle" font-family="monospace" font-size="12">{x_label}</text>')
    parts.append(f'<text x="18" y="{_MARGIN_T + plot_h // 2}" text-anchor="middle" '
                 f'font-family="monospace" font-size="12" '
                 f'transform="rotate(-90 18 {_MARGIN_T + plot_h // 2})">{y_label}</text>')
    for idx, s in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        coords = " ".join(f"{_fmt(px)},{_fmt(py)}"
                          for px, py in (to_px(x, y) for x, y in s.points))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{coords}"/>')
        ly = _MARGIN_T + 16 * idx + 10
        lx = _MARGIN_L + plot_w + 12
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly + 4}" font-family="monospace" '
                     f'font-size="11">{s.name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
