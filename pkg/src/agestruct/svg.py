"""Minimal self-contained SVG charts (no plotting library needed)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = 60

# a few anchor colours of a perceptually ordered dark-to-light ramp
_RAMP = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)


def _colour(t):
    t = min(max(float(t), 0.0), 1.0) * (len(_RAMP) - 1)
    k = min(int(t), len(_RAMP) - 2)
    c = _RAMP[k] + (t - k) * (_RAMP[k + 1] - _RAMP[k])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def _fmt(v):
    return f"{v:.6g}"


def _header(title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
    ]


def line_chart(x, y, title="", xlabel="t", ylabel="norm", log=True):
    """Polyline chart of ``y`` against ``x``, log-scaled in ``y`` by default.

    Non-positive values are dropped on a log axis.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y)
    if log:
        keep &= y > 0
    x, y = x[keep], y[keep]
    if len(x) == 0:
        raise ValueError("nothing to plot")
    yy = np.log10(y) if log else y
    x0, x1 = float(x.min()), float(x.max())
    y0, y1 = float(yy.min()), float(yy.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    px = MARGIN + (x - x0) / (x1 - x0) * pw
    py = HEIGHT - MARGIN - (yy - y0) / (y1 - y0) * ph
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    out = _header(title)
    out.append(
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>'
    )
    out.append(f'<polyline fill="none" stroke="#1f4e9a" stroke-width="1.5" points="{pts}"/>')
    ylab = f"log10 {ylabel}" if log else ylabel
    for val, ypos in ((y0, HEIGHT - MARGIN), (y1, MARGIN)):
        out.append(
            f'<text x="{MARGIN - 6}" y="{ypos + 4}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{_fmt(val)}</text>'
        )
    for val, xpos in ((x0, MARGIN), (x1, WIDTH - MARGIN)):
        out.append(
            f'<text x="{xpos}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_fmt(val)}</text>'
        )
    out.append(
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylab)}</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(values, ages, x, title=""):
    """Grid of rects, one per ``(age, x)`` node; age increases downwards."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape != (len(ages), len(x)):
        raise ValueError("values must be (len(ages), len(x))")
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo if hi > lo else 1.0
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    cw, ch = pw / values.shape[1], ph / values.shape[0]
    out = _header(title)
    out.append('<g shape-rendering="crispEdges">')
    for j in range(values.shape[0]):
        for i in range(values.shape[1]):
            out.append(
                f'<rect class="cell" x="{MARGIN + i * cw:.3f}" y="{MARGIN + j * ch:.3f}" '
                f'width="{cw:.3f}" height="{ch:.3f}" fill="{_colour((values[j, i] - lo) / span)}"/>'
            )
    out.append("</g>")
    out.append(
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 30}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">x in [{_fmt(x[0])}, {_fmt(x[-1])}]; age {_fmt(ages[0])} (top) to '
        f'{_fmt(ages[-1])} (bottom); values {_fmt(lo)} to {_fmt(hi)}</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"

