"""Minimal self-contained SVG line charts (axes, polylines, legend)."""
from __future__ import annotations

from dataclasses import dataclass
from html import escape
from typing import Sequence

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


@dataclass
class Series:
    label: str
    xs: Sequence[float]
    ys: Sequence[float]
    dashed: bool = False


@dataclass
class Panel:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(t) for t in np.arange(start, hi + step * 1e-9, step)]


def _tick_label(v: float) -> str:
    s = f"{v:.4g}"
    return "0" if s in ("-0", "0") else s


def _panel(p: Panel, x0: float, y0: float, w: float, h: float) -> list[str]:
    left, right, top, bottom = 60, 15, 30, 45
    pw, ph = w - left - right, h - top - bottom
    xs = np.concatenate([np.asarray(s.xs, float) for s in p.series]) if p.series else np.zeros(1)
    ys = np.concatenate([np.asarray(s.ys, float) for s in p.series]) if p.series else np.zeros(1)
    xlo, xhi = float(xs.min()), float(xs.max())
    ylo, yhi = float(ys.min()), float(ys.max())
    if xhi == xlo:
        xlo, xhi = xlo - 1, xhi + 1
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def px(v):
        return x0 + left + (v - xlo) / (xhi - xlo) * pw

    def py(v):
        return y0 + top + (1 - (v - ylo) / (yhi - ylo)) * ph

    out = [
        f'<text x="{_fmt(x0 + w / 2)}" y="{_fmt(y0 + 18)}" text-anchor="middle" '
        f'font-size="14">{escape(p.title)}</text>',
        f'<rect x="{_fmt(x0 + left)}" y="{_fmt(y0 + top)}" width="{_fmt(pw)}" '
        f'height="{_fmt(ph)}" fill="none" stroke="#000"/>',
    ]
    for t in _ticks(xlo, xhi):
        out.append(f'<line x1="{_fmt(px(t))}" y1="{_fmt(y0 + top + ph)}" x2="{_fmt(px(t))}" '
                   f'y2="{_fmt(y0 + top + ph + 4)}" stroke="#000"/>')
        out.append(f'<text x="{_fmt(px(t))}" y="{_fmt(y0 + top + ph + 16)}" '
                   f'text-anchor="middle" font-size="10">{_tick_label(t)}</text>')
    for t in _ticks(ylo, yhi):
        out.append(f'<line x1="{_fmt(x0 + left - 4)}" y1="{_fmt(py(t))}" x2="{_fmt(x0 + left + pw)}" '
                   f'y2="{_fmt(py(t))}" stroke="#ddd"/>')
        out.append(f'<text x="{_fmt(x0 + left - 6)}" y="{_fmt(py(t) + 3)}" '
                   f'text-anchor="end" font-size="10">{_tick_label(t)}</text>')
    out.append(f'<text x="{_fmt(x0 + left + pw / 2)}" y="{_fmt(y0 + h - 8)}" '
               f'text-anchor="middle" font-size="12">{escape(p.xlabel)}</text>')
    cy = y0 + top + ph / 2
    out.append(f'<text x="{_fmt(x0 + 14)}" y="{_fmt(cy)}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 {_fmt(x0 + 14)} {_fmt(cy)})">{escape(p.ylabel)}</text>')
    for i, s in enumerate(p.series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s.xs, s.ys))
        dash = ' stroke-dasharray="5,3"' if s.dashed else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        ly = y0 + top + 14 + 14 * i
        lx = x0 + left + pw - 120
        out.append(f'<line x1="{_fmt(lx)}" y1="{_fmt(ly - 4)}" x2="{_fmt(lx + 18)}" y2="{_fmt(ly - 4)}" '
                   f'stroke="{color}" stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{_fmt(lx + 22)}" y="{_fmt(ly)}" font-size="10">{escape(s.label)}</text>')
    return out


def render(panels: Sequence[Panel], panel_w: int = 480, panel_h: int = 320) -> str:
    """Lay panels out left to right and return the SVG document text."""
    w, h = panel_w * len(panels), panel_h
    body = []
    for i, p in enumerate(panels):
        body.extend(_panel(p, i * panel_w, 0, panel_w, panel_h))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="sans-serif">\n'
        f'<rect width="{w}" height="{h}" fill="#fff"/>\n' + "\n".join(body) + "\n</svg>\n"
    )
