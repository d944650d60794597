"""Hand-written SVG output: map overlays with paths and robot traces, and
simple line charts for training curves.  All plan geometry is in world
meters; the y axis is flipped so north is up."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .sdf import OccupancyMask, WorldTransform

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


@dataclass
class PlotSpec:
    mask: OccupancyMask
    waypoints: list = field(default_factory=list)   # arrays (T+1, 2)
    traces: list = field(default_factory=list)      # arrays (n, 2+)
    regions: dict = field(default_factory=dict)     # name -> ((cx, cy), r)
    title: str = ""


def _fmt(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".")


def _points(pts, sx, sy, H) -> str:
    return " ".join(f"{_fmt(x * sx)},{_fmt(H - y * sy)}" for x, y in np.asarray(pts, float)[:, :2])


def plan_svg(spec: PlotSpec, size: int = 480) -> str:
    """Obstacle pixels as grey run-length rectangles, regions as circles,
    planned waypoints as polylines with dots, executed traces dashed."""
    m, n = spec.mask.extent
    scale = size / max(m, n)
    Wd, Hd = m * scale, n * scale
    tf = WorldTransform.for_mask(spec.mask)
    pw, ph = abs(tf.sx) * scale, abs(tf.sy) * scale
    top = 24 if spec.title else 0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(Wd)}" height="{_fmt(Hd + top)}" '
           f'viewBox="0 {-top} {_fmt(Wd)} {_fmt(Hd + top)}">',
           f'<rect x="0" y="0" width="{_fmt(Wd)}" height="{_fmt(Hd)}" fill="white" stroke="black"/>']
    if spec.title:
        out.append(f'<text x="4" y="-6" font-family="sans-serif" font-size="14">{escape(spec.title)}</text>')
    grid = spec.mask.grid
    H = grid.shape[0]
    for r in range(H):
        row = grid[r]
        c = 0
        while c < len(row):
            if row[c]:
                start = c
                while c < len(row) and row[c]:
                    c += 1
                # pixel (col, row) has its centre at to_world((col, H-1-row))
                x0, y0 = tf.to_world(np.array([start, H - 1 - r], float)) - (abs(tf.sx) / 2, -abs(tf.sy) / 2)
                out.append(f'<rect x="{_fmt(x0 * scale)}" y="{_fmt(Hd - y0 * scale)}" '
                           f'width="{_fmt((c - start) * pw)}" height="{_fmt(ph)}" fill="#777"/>')
            else:
                c += 1
    for i, (name, ((cx, cy), rad)) in enumerate(sorted(spec.regions.items())):
        col = PALETTE[(i + 2) % len(PALETTE)]
        out.append(f'<circle cx="{_fmt(cx * scale)}" cy="{_fmt(Hd - cy * scale)}" r="{_fmt(rad * scale)}" '
                   f'fill="{col}" fill-opacity="0.25" stroke="{col}"/>')
        out.append(f'<text x="{_fmt(cx * scale)}" y="{_fmt(Hd - cy * scale + 5)}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{escape(name)}</text>')
    for i, tr in enumerate(spec.traces):
        col = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline points="{_points(tr, scale, scale, Hd)}" fill="none" stroke="{col}" '
                   f'stroke-dasharray="4 3" stroke-width="1.5"/>')
    for i, wp in enumerate(spec.waypoints):
        col = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline points="{_points(wp, scale, scale, Hd)}" fill="none" stroke="{col}" '
                   f'stroke-width="2"/>')
        for x, y in np.asarray(wp, float):
            out.append(f'<circle cx="{_fmt(x * scale)}" cy="{_fmt(Hd - y * scale)}" r="3" fill="{col}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    return [first + k * step for k in range(int((hi - first) / step) + 1)]


def line_chart_svg(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
                   width: int = 560, height: int = 320) -> str:
    """``series``: name -> (xs, ys).  Empty or all-NaN series are skipped."""
    pad_l, pad_r, pad_t, pad_b = 60, 120, 30, 40
    pts = {k: (np.asarray(x, float), np.asarray(y, float)) for k, (x, y) in series.items()}
    pts = {k: (x[np.isfinite(y)], y[np.isfinite(y)]) for k, (x, y) in pts.items()}
    pts = {k: v for k, v in pts.items() if len(v[0])}
    xs = np.concatenate([v[0] for v in pts.values()]) if pts else np.array([0.0, 1.0])
    ys = np.concatenate([v[1] for v in pts.values()]) if pts else np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def X(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def Y(v):
        return pad_t + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
           f'<text x="{pad_l}" y="18" font-size="14">{escape(title)}</text>',
           f'<text x="{pad_l + pw / 2}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{pad_t + ph / 2}" text-anchor="middle" '
           f'transform="rotate(-90 14 {pad_t + ph / 2})">{escape(ylabel)}</text>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_fmt(X(t))}" y1="{pad_t + ph}" x2="{_fmt(X(t))}" y2="{pad_t + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(X(t))}" y="{pad_t + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{pad_l - 4}" y1="{_fmt(Y(t))}" x2="{pad_l}" y2="{_fmt(Y(t))}" stroke="black"/>')
        out.append(f'<text x="{pad_l - 6}" y="{_fmt(Y(t) + 4)}" text-anchor="end">{t:g}</text>')
    for i, (name, (x, y)) in enumerate(pts.items()):
        col = PALETTE[i % len(PALETTE)]
        line = " ".join(f"{_fmt(X(a))},{_fmt(Y(b))}" for a, b in zip(x, y))
        out.append(f'<polyline points="{line}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        ly = pad_t + 14 * i + 8
        out.append(f'<line x1="{pad_l + pw + 8}" y1="{ly}" x2="{pad_l + pw + 24}" y2="{ly}" stroke="{col}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 28}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
