"""Standalone SVG charts. No display server, no plotting dependency:
charts are built as plain strings, deterministic for identical inputs."""

from __future__ import annotations

import math
from html import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_W, _H = 640, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 16, 36, 44


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10.0 ** math.floor(math.log10(span / n))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * span:
        out.append(round(t, 12))
        t += step
    return out or [lo, hi]


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _header(title: str) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_W / 2:g}" y="20" text-anchor="middle" font-size="14">'
            f"{escape(title)}</text>"
        )
    return parts


def _axes(parts: list[str], x_lo, x_hi, y_lo, y_hi, x_label, y_label):
    px0, px1 = _MARGIN_L, _W - _MARGIN_R
    py0, py1 = _H - _MARGIN_B, _MARGIN_T

    def sx(x):
        return px0 + (x - x_lo) / (x_hi - x_lo) * (px1 - px0)

    def sy(y):
        return py0 - (y - y_lo) / (y_hi - y_lo) * (py0 - py1)

    parts.append(
        f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>'
        f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>'
    )
    for t in _ticks(x_lo, x_hi):
        if x_lo <= t <= x_hi:
            x = sx(t)
            parts.append(
                f'<line x1="{x:.1f}" y1="{py0}" x2="{x:.1f}" y2="{py0 + 4}" stroke="black"/>'
                f'<text x="{x:.1f}" y="{py0 + 16}" text-anchor="middle">{_fmt(t)}</text>'
            )
    for t in _ticks(y_lo, y_hi):
        if y_lo <= t <= y_hi:
            y = sy(t)
            parts.append(
                f'<line x1="{px0 - 4}" y1="{y:.1f}" x2="{px0}" y2="{y:.1f}" stroke="black"/>'
                f'<text x="{px0 - 6}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>'
            )
    if x_label:
        parts.append(
            f'<text x="{(px0 + px1) / 2:g}" y="{_H - 8}" text-anchor="middle">'
            f"{escape(x_label)}</text>"
        )
    if y_label:
        parts.append(
            f'<text x="14" y="{(py0 + py1) / 2:g}" text-anchor="middle" '
            f'transform="rotate(-90 14 {(py0 + py1) / 2:g})">{escape(y_label)}</text>'
        )
    return sx, sy


def line_chart(series: dict[str, list[tuple[float, float]]], title: str = "",
               x_label: str = "", y_label: str = "") -> str:
    """Multi-series line chart. series maps a legend name to (x, y) points."""
    pts = [p for rows in series.values() for p in rows]
    if not pts:
        raise ValueError("line_chart needs at least one point")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    parts = _header(title)
    sx, sy = _axes(parts, x_lo, x_hi, y_lo, y_hi, x_label, y_label)
    for i, (name, rows) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if rows:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in rows)
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        ly = _MARGIN_T + 14 * i
        parts.append(
            f'<line x1="{_W - 150}" y1="{ly}" x2="{_W - 130}" y2="{ly}" '
            f'stroke="{color}" stroke-width="1.5"/>'
            f'<text x="{_W - 126}" y="{ly + 4}">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(labels: list[str], values: list[float], title: str = "",
              y_label: str = "") -> str:
    """Vertical bar chart over categorical labels."""
    if not labels or len(labels) != len(values):
        raise ValueError("bar_chart needs matching non-empty labels and values")
    y_lo = min(0.0, min(values))
    y_hi = max(0.0, max(values))
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    parts = _header(title)
    sx, sy = _axes(parts, 0.0, float(len(labels)), y_lo, y_hi, "", y_label)
    zero = sy(0.0)
    slot = (( _W - _MARGIN_R) - _MARGIN_L) / len(labels)
    for i, (label, v) in enumerate(zip(labels, values)):
        x = _MARGIN_L + i * slot + 0.15 * slot
        w = 0.7 * slot
        top = sy(v)
        y, h = (top, zero - top) if v >= 0 else (zero, top - zero)
        color = PALETTE[i % len(PALETTE)]
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" fill="{color}"/>'
            f'<text x="{x + w / 2:.1f}" y="{_H - _MARGIN_B + 16}" text-anchor="middle">'
            f"{escape(str(label))}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
