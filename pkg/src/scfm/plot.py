"""Static SVG scatter and line plots with deterministic bytes."""

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")
WIDTH, HEIGHT, MARGIN = 480, 480, 40


def _fmt(v):
    return f"{v:.2f}"


def _bounds(arrays):
    pts = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in arrays])
    pts = pts[np.isfinite(pts).all(axis=1)]
    if len(pts) == 0:
        return np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = np.maximum((hi - lo) * 0.05, 1e-9)
    return lo - pad, hi + pad


def _mapper(lo, hi, width, height):
    def to_px(p):
        p = np.asarray(p, dtype=np.float64)
        x = MARGIN + (p[..., 0] - lo[0]) / (hi[0] - lo[0]) * (width - 2 * MARGIN)
        y = height - MARGIN - (p[..., 1] - lo[1]) / (hi[1] - lo[1]) * (height - 2 * MARGIN)
        return x, y
    return to_px


def _frame(width, height, title, body, legend):
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{MARGIN}" y="{MARGIN}" width="{width - 2 * MARGIN}" '
           f'height="{height - 2 * MARGIN}" fill="none" stroke="#999"/>']
    if title:
        out.append(f'<text x="{width // 2}" y="{MARGIN // 2 + 5}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{escape(title)}</text>')
    out.extend(body)
    for i, (name, color) in enumerate(legend):
        y = MARGIN + 14 + 16 * i
        out.append(f'<rect x="{width - MARGIN - 110}" y="{y - 9}" width="10" height="10" '
                   f'fill="{color}"/>')
        out.append(f'<text x="{width - MARGIN - 95}" y="{y}" font-family="sans-serif" '
                   f'font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(layers, title="", radius=1.5, width=WIDTH, height=HEIGHT):
    """Overlay of named ``(n, 2)`` point sets, drawn in the given order."""
    layers = [(name, np.asarray(pts, dtype=np.float64)) for name, pts in layers]
    lo, hi = _bounds([p for _, p in layers])
    to_px = _mapper(lo, hi, width, height)
    body, legend = [], []
    for i, (name, pts) in enumerate(layers):
        color = PALETTE[i % len(PALETTE)]
        legend.append((name, color))
        xs, ys = to_px(pts)
        body.append(f'<g fill="{color}" fill-opacity="0.5">')
        body.extend(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{radius}"/>'
                    for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y))
        body.append("</g>")
    return _frame(width, height, title, body, legend)


def line_svg(series, title="", width=WIDTH, height=HEIGHT // 1.5):
    """Polylines for named ``(xs, ys)`` series; non-finite points are skipped."""
    height = int(height)
    pts = [np.column_stack([np.asarray(x, float), np.asarray(y, float)]) for _, (x, y) in series]
    lo, hi = _bounds(pts)
    to_px = _mapper(lo, hi, width, height)
    body, legend = [], []
    for i, ((name, _), p) in enumerate(zip(series, pts)):
        color = PALETTE[i % len(PALETTE)]
        legend.append((name, color))
        p = p[np.isfinite(p).all(axis=1)]
        xs, ys = to_px(p)
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                    f'points="{coords}"/>')
    body.append(f'<text x="{MARGIN}" y="{height - 8}" font-family="sans-serif" font-size="10">'
                f'x: {lo[0]:.4g} .. {hi[0]:.4g}   y: {lo[1]:.4g} .. {hi[1]:.4g}</text>')
    return _frame(width, height, title, body, legend)


def write_svg(path, svg):
    with open(path, "w", newline="\n") as f:
        f.write(svg)
