"""Minimal SVG line charts (polylines, axes, ticks, legend) without a renderer."""

from xml.sax.saxutils import escape

import numpy as np

__all__ = ["line_chart"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, count)


def line_chart(series, title="", xlabel="t", ylabel="", width=640, height=400, max_points=2000):
    """Render ``series`` (a list of ``(label, x, y)``) as an SVG document string.

    Long series are thinned to at most ``max_points`` vertices by regular
    striding, which keeps the output deterministic.
    """
    left, right, top, bottom = 70, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([np.asarray(x, float) for _, x, _ in series])
    ys = np.concatenate([np.asarray(y, float) for _, _, y in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(min(ys.min(), 0.0)), float(ys.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for v in _ticks(x0, x1):
        out.append(f'<line x1="{sx(v):.2f}" y1="{top + ph}" x2="{sx(v):.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(v):.2f}" y="{top + ph + 16}" text-anchor="middle">{v:.4g}</text>')
    for v in _ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{sy(v):.2f}" x2="{left}" y2="{sy(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.2f}" text-anchor="end">{v:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, (label, x, y) in enumerate(series):
        x, y = np.asarray(x, float), np.asarray(y, float)
        stride = max(1, int(np.ceil(x.size / max_points)))
        idx = np.arange(0, x.size, stride)
        if idx[-1] != x.size - 1:
            idx = np.append(idx, x.size - 1)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[idx], y[idx]))
        color = _COLORS[k % len(_COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        ly = top + 14 * (k + 1)
        out.append(f'<line x1="{left + pw - 120}" y1="{ly}" x2="{left + pw - 100}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{left + pw - 95}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
