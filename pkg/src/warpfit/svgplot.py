"""Tiny SVG line plotter (polylines and axes only)."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
DASHES = {"solid": None, "dash": "6,3", "dot": "1,3", "dashdot": "6,3,1,3"}


class Line:
    def __init__(self, x, y, color: Optional[str] = None, style: str = "solid", width: float = 1.2,
                 opacity: float = 1.0):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.color = color
        self.style = style
        self.width = width
        self.opacity = opacity


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + 1e-9 * step, step)]


def render(lines: Sequence[Line], title: str = "", xlabel: str = "", ylabel: str = "",
           size: Tuple[int, int] = (640, 420)) -> str:
    W, H = size
    ml, mr, mt, mb = 60, 20, 30, 45
    xs = np.concatenate([ln.x for ln in lines]) if lines else np.array([0.0, 1.0])
    ys = np.concatenate([ln.y for ln in lines]) if lines else np.array([0.0, 1.0])
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (W - ml - mr)

    def py(y):
        return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{ml}" y1="{H - mb}" x2="{W - mr}" y2="{H - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{H - mb}" stroke="black"/>',
    ]
    for tx in _ticks(x0, x1):
        out.append(f'<line x1="{px(tx):.2f}" y1="{H - mb}" x2="{px(tx):.2f}" y2="{H - mb + 4}" stroke="black"/>')
        out.append(f'<text x="{px(tx):.2f}" y="{H - mb + 16}" font-size="11" text-anchor="middle">{tx:g}</text>')
    for ty in _ticks(y0, y1):
        out.append(f'<line x1="{ml - 4}" y1="{py(ty):.2f}" x2="{ml}" y2="{py(ty):.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{py(ty) + 4:.2f}" font-size="11" text-anchor="end">{ty:.3g}</text>')
    for i, ln in enumerate(lines):
        color = ln.color or PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(ln.x, ln.y) if np.isfinite(b))
        dash = DASHES.get(ln.style)
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="{ln.width}" '
            f'stroke-opacity="{ln.opacity}"{dash_attr} points="{pts}"/>'
        )
    if title:
        out.append(f'<text x="{W / 2}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{(ml + W - mr) / 2}" y="{H - 8}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(
            f'<text x="14" y="{(mt + H - mb) / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 14 {(mt + H - mb) / 2})">{escape(ylabel)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
