"""Minimal SVG emitters: line plots and heatmaps for batch reports."""

import numpy as np


def _svg_header(w, h):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
            f'height="{h}" viewBox="0 0 {w} {h}">\n'
            f'<rect width="{w}" height="{h}" fill="white"/>\n')


def line_plot(path, xs, ys, title="", xlabel="", ylabel="", logy=False,
              w=640, h=420):
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = w - ml - mr, h - mt - mb
    yv = np.log10(np.maximum(ys, 1e-300)) if logy else ys
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(yv.min()), float(yv.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.06 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def X(v):
        return ml + pw * (v - x0) / (x1 - x0)

    def Y(v):
        return mt + ph * (1.0 - (v - y0) / (y1 - y0))

    pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(xs, yv))
    parts = [_svg_header(w, h)]
    parts.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
                 'fill="none" stroke="black"/>\n')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yy = y0 + frac * (y1 - y0)
        lab = f"1e{yy:.1f}" if logy else f"{yy:.3g}"
        parts.append(f'<text x="{ml - 8}" y="{Y(yy):.1f}" font-size="11" '
                     f'text-anchor="end">{lab}</text>\n')
        xx = x0 + frac * (x1 - x0)
        parts.append(f'<text x="{X(xx):.1f}" y="{h - mb + 16}" font-size="11" '
                     f'text-anchor="middle">{xx:.3g}</text>\n')
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f5fa8" '
                 'stroke-width="1.6"/>\n')
    for a, b in zip(xs, yv):
        parts.append(f'<circle cx="{X(a):.2f}" cy="{Y(b):.2f}" r="2.6" '
                     'fill="#1f5fa8"/>\n')
    parts.append(f'<text x="{w / 2}" y="20" font-size="14" '
                 f'text-anchor="middle">{title}</text>\n')
    parts.append(f'<text x="{w / 2}" y="{h - 12}" font-size="12" '
                 f'text-anchor="middle">{xlabel}</text>\n')
    parts.append(f'<text x="16" y="{h / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 16 {h / 2})">{ylabel}</text>\n')
    parts.append("</svg>\n")
    with open(path, "w") as f:
        f.write("".join(parts))
    return path


def heatmap(path, values, title="", w=560, h=520):
    v = np.asarray(values, float)
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    if hi == lo:
        hi = lo + 1.0
    ml, mt = 50, 40
    ny, nx = v.shape
    cw = (w - ml - 20) / nx
    ch = (h - mt - 30) / ny
    parts = [_svg_header(w, h)]
    for i in range(ny):
        for j in range(nx):
            t = (v[i, j] - lo) / (hi - lo)
            r = int(255 * t)
            b = int(255 * (1 - t))
            parts.append(
                f'<rect x="{ml + j * cw:.1f}" y="{mt + i * ch:.1f}" '
                f'width="{cw + 0.5:.1f}" height="{ch + 0.5:.1f}" '
                f'fill="rgb({r},40,{b})"/>\n'
            )
    parts.append(f'<text x="{w / 2}" y="20" font-size="14" '
                 f'text-anchor="middle">{title} [{lo:.3g}, {hi:.3g}]</text>\n')
    parts.append("</svg>\n")
    with open(path, "w") as f:
        f.write("".join(parts))
    return path
