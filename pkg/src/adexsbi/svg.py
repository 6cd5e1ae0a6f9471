"""Tiny deterministic SVG renderings: line plots, histogram and scatter grids.

Output depends only on the data (no timestamps or random ids), so reruns
produce identical files.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ("#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b")


def _doc(width: int, height: int, body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


class _Panel:
    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim = xlim if xlim[1] > xlim[0] else (xlim[0] - 0.5, xlim[0] + 0.5)
        self.ylim = ylim if ylim[1] > ylim[0] else (ylim[0] - 0.5, ylim[0] + 0.5)

    def x(self, v):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(v, float) - lo) / (hi - lo) * self.w

    def y(self, v):
        lo, hi = self.ylim
        return self.y0 + self.h - (np.asarray(v, float) - lo) / (hi - lo) * self.h

    def frame(self, title: str = "", x_label: str = "", y_label: str = "") -> list[str]:
        out = [f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" '
               f'fill="none" stroke="#888"/>']
        if title:
            out.append(f'<text x="{self.x0 + self.w / 2:.1f}" y="{self.y0 - 4}" '
                       f'text-anchor="middle">{escape(title)}</text>')
        if x_label:
            out.append(f'<text x="{self.x0 + self.w / 2:.1f}" y="{self.y0 + self.h + 24}" '
                       f'text-anchor="middle">{escape(x_label)}</text>')
        if y_label:
            cx, cy = self.x0 - 30, self.y0 + self.h / 2
            out.append(f'<text x="{cx}" y="{cy:.1f}" text-anchor="middle" '
                       f'transform="rotate(-90 {cx} {cy:.1f})">{escape(y_label)}</text>')
        for v, anchor in ((self.xlim[0], "start"), (self.xlim[1], "end")):
            out.append(f'<text x="{float(self.x(v)):.1f}" y="{self.y0 + self.h + 12}" '
                       f'text-anchor="{anchor}">{v:g}</text>')
        for v in self.ylim:
            out.append(f'<text x="{self.x0 - 3}" y="{float(self.y(v)) + 3:.1f}" '
                       f'text-anchor="end">{v:.3g}</text>')
        return out


def lines_svg(x, series: list[tuple[str, np.ndarray]], x_label: str = "", y_label: str = "",
              width: int = 720, height: int = 360) -> str:
    ys = np.concatenate([np.asarray(s, float) for _, s in series])
    p = _Panel(60, 20, width - 200, height - 60, (float(np.min(x)), float(np.max(x))),
               (float(ys.min()), float(ys.max())))
    body = p.frame(x_label=x_label, y_label=y_label)
    px = p.x(x)
    for i, (name, s) in enumerate(series):
        color = _PALETTE[min(i, len(_PALETTE) - 1)]
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, p.y(s)))
        width_ = 1.5 if i == 0 else 0.8
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width_}" '
                    f'stroke-opacity="{1.0 if i == 0 else 0.6}" points="{pts}"/>')
        if i < 12:
            ly = 30 + 14 * i
            body.append(f'<line x1="{width - 130}" y1="{ly}" x2="{width - 110}" y2="{ly}" stroke="{color}"/>')
            body.append(f'<text x="{width - 105}" y="{ly + 3}">{escape(name)}</text>')
    return _doc(width, height, body)


def histogram_grid_svg(hists: list[tuple[str, np.ndarray, np.ndarray]], size: int = 200) -> str:
    """One panel per ``(name, edges, counts)``."""
    body = []
    for k, (name, edges, counts) in enumerate(hists):
        p = _Panel(50 + k * (size + 50), 20, size, size, (float(edges[0]), float(edges[-1])),
                   (0.0, float(max(counts.max(), 1))))
        body += p.frame(title=name)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            x0, x1, y = float(p.x(lo)), float(p.x(hi)), float(p.y(c))
            body.append(f'<rect x="{x0:.1f}" y="{y:.1f}" width="{x1 - x0:.1f}" '
                        f'height="{p.y0 + p.h - y:.1f}" fill="#1f77b4"/>')
    return _doc(len(hists) * (size + 50) + 30, size + 60, body)


def scatter_grid_svg(names: list[str], samples: np.ndarray, lim: tuple[float, float],
                     size: int = 150) -> str:
    """Lower-triangle grid of pairwise scatter panels."""
    d = len(names)
    body = []
    for i in range(1, d):
        for j in range(i):
            p = _Panel(60 + j * (size + 20), 20 + (i - 1) * (size + 40), size, size, lim, lim)
            body += p.frame(x_label=names[j] if i == d - 1 else "",
                            y_label=names[i] if j == 0 else "")
            for a, b in zip(p.x(samples[:, j]), p.y(samples[:, i])):
                body.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="1.2" fill="#1f77b4" fill-opacity="0.5"/>')
    return _doc(60 + (d - 1) * (size + 20) + 20, 20 + (d - 1) * (size + 40) + 20, body)
