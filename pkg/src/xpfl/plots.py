"""Minimal SVG emitters: line charts, scatter plots and image grids."""

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _fmt(x):
    return f"{x:.2f}"


def _doc(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def _frame(x0, y0, x1, y1, xlabel, ylabel, title, xr, yr):
    out = [f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" fill="none" stroke="black"/>']
    if title:
        out.append(f'<text x="{(x0 + x1) / 2}" y="{y0 - 8}" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{y1 + 32}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>')
    out.append(f'<text x="{x0 - 38}" y="{(y0 + y1) / 2}" font-size="11" '
               f'transform="rotate(-90 {x0 - 38} {(y0 + y1) / 2})" text-anchor="middle">{escape(ylabel)}</text>')
    for frac in (0.0, 0.5, 1.0):
        xv = xr[0] + frac * (xr[1] - xr[0])
        yv = yr[0] + frac * (yr[1] - yr[0])
        px = x0 + frac * (x1 - x0)
        py = y1 - frac * (y1 - y0)
        out.append(f'<text x="{_fmt(px)}" y="{y1 + 14}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{x0 - 4}" y="{_fmt(py + 3)}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    return out


def _range(vals):
    vals = np.asarray([v for v in vals if np.isfinite(v)], dtype=np.float64)
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_chart(series, xlabel="round", ylabel="", title="", width=560, height=360):
    """``series`` maps name -> (xs, ys). Polylines with circle markers and a legend."""
    x0, y0, x1, y1 = 60, 30, width - 150, height - 50
    xr = _range([x for xs, _ in series.values() for x in xs])
    yr = _range([y for _, ys in series.values() for y in ys])
    body = _frame(x0, y0, x1, y1, xlabel, ylabel, title, xr, yr)

    def px(x):
        return x0 + (x - xr[0]) / (xr[1] - xr[0]) * (x1 - x0)

    def py(y):
        return y1 - (y - yr[0]) / (yr[1] - yr[0]) * (y1 - y0)

    for i, (name, (xs, ys)) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        pts = [(px(x), py(y)) for x, y in zip(xs, ys) if np.isfinite(y)]
        if pts:
            body.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="'
                        + " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts) + '"/>')
        body.extend(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{col}"/>' for a, b in pts)
        ly = y0 + 14 * i + 8
        body.append(f'<line x1="{x1 + 10}" y1="{ly}" x2="{x1 + 28}" y2="{ly}" stroke="{col}" stroke-width="2"/>')
        body.append(f'<text x="{x1 + 32}" y="{ly + 4}" font-size="10">{escape(str(name))}</text>')
    return _doc(width, height, body)


def scatter(points, labels=None, title="", width=420, height=420):
    """2-D scatter coloured by integer label."""
    P = np.asarray(points, dtype=np.float64)
    labels = np.zeros(len(P), dtype=int) if labels is None else np.asarray(labels)
    x0, y0, x1, y1 = 50, 30, width - 20, height - 50
    xr, yr = _range(P[:, 0]), _range(P[:, 1])
    body = _frame(x0, y0, x1, y1, "dim 1", "dim 2", title, xr, yr)
    for (x, y), lab in zip(P, labels):
        cx = x0 + (x - xr[0]) / (xr[1] - xr[0]) * (x1 - x0)
        cy = y1 - (y - yr[0]) / (yr[1] - yr[0]) * (y1 - y0)
        body.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="3" fill="{PALETTE[int(lab) % len(PALETTE)]}"/>')
    return _doc(width, height, body)


def image_grid(rows, cell=4, gap=6, row_labels=None):
    """Grey-scale grid; ``rows`` is a list of lists of (H, W[, C]) arrays in [0, 1]."""
    label_w = 70 if row_labels else 0
    H, W = np.asarray(rows[0][0]).shape[:2]
    ncol = max(len(r) for r in rows)
    width = label_w + ncol * (W * cell + gap) + gap
    height = len(rows) * (H * cell + gap) + gap
    body = []
    for r, row in enumerate(rows):
        oy = gap + r * (H * cell + gap)
        if row_labels:
            body.append(f'<text x="4" y="{oy + H * cell / 2 + 4}" font-size="11">{escape(row_labels[r])}</text>')
        for c, img in enumerate(row):
            img = np.asarray(img, dtype=np.float64)
            if img.ndim == 3:
                img = img.mean(axis=-1)
            ox = label_w + gap + c * (W * cell + gap)
            for i in range(H):
                for j in range(W):
                    v = int(round(255 * min(1.0, max(0.0, img[i, j]))))
                    body.append(f'<rect x="{ox + j * cell}" y="{oy + i * cell}" width="{cell}" '
                                f'height="{cell}" fill="rgb({v},{v},{v})"/>')
    return _doc(width, height, body)
