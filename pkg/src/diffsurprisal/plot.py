"""Self-contained SVG scatter plot with a fitted quadratic overlay."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

POINT_COLOR = "#1f77b4"
CURVE_COLOR = "#ff7f0e"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, n)


def wundt_svg(x, y, curve_x, curve_y, vertex=None, *, title: str = "",
              xlabel: str = "surprisal (nats)", ylabel: str = "adjusted rating",
              width: int = 640, height: int = 480) -> str:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cx = np.asarray(curve_x, dtype=float)
    cy = np.asarray(curve_y, dtype=float)
    left, right, top, bottom = 70, 20, 40, 60
    x_lo, x_hi = float(min(x.min(), cx.min())), float(max(x.max(), cx.max()))
    y_lo, y_hi = float(min(y.min(), cy.min())), float(max(y.max(), cy.max()))
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad_y = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y
    pw, ph = width - left - right, height - top - bottom

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return top + (y_hi - v) / (y_hi - y_lo) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for v in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{px(v):.2f}" y1="{top + ph}" x2="{px(v):.2f}" '
                   f'y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(v):.2f}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{v:.3g}</text>')
    for v in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{left - 5}" y1="{py(v):.2f}" x2="{left}" y2="{py(v):.2f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(v) + 4:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{v:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 15}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    out.append(f'<g class="points" fill="{POINT_COLOR}" fill-opacity="0.35">')
    for a, b in zip(x, y):
        out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="2.5"/>')
    out.append("</g>")
    path = " ".join(f"{'M' if i == 0 else 'L'}{px(a):.2f},{py(b):.2f}"
                    for i, (a, b) in enumerate(zip(cx, cy)))
    out.append(f'<path class="fit" d="{path}" fill="none" stroke="{CURVE_COLOR}" '
               f'stroke-width="2.5"/>')
    if vertex is not None:
        vx, vy = vertex
        out.append(f'<circle class="vertex" cx="{px(vx):.2f}" cy="{py(vy):.2f}" r="6" '
                   f'fill="none" stroke="black" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
