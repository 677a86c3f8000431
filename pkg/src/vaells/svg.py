"""Minimal SVG 1.1 scatter/line plots with axes and a legend."""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

CATEGORICAL = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
               "#7f7f7f", "#bcbd22", "#17becf"]
# a few stops of a perceptually ordered blue-green-yellow map
_RAMP = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], float)


def ramp_color(t: float) -> str:
    t = float(np.clip(t, 0.0, 1.0)) * (len(_RAMP) - 1)
    i = min(int(t), len(_RAMP) - 2)
    rgb = _RAMP[i] + (t - i) * (_RAMP[i + 1] - _RAMP[i])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in rgb)


@dataclass
class Layer:
    points: np.ndarray  # (n, 2)
    kind: str = "scatter"  # scatter | line | marker
    colors: list | str = "#1f77b4"
    label: str | None = None
    size: float = 2.0


@dataclass
class Figure:
    title: str = ""
    width: int = 480
    height: int = 480
    layers: list = field(default_factory=list)

    def scatter(self, pts, colors="#1f77b4", label=None, size=2.0):
        self.layers.append(Layer(np.asarray(pts, float), "scatter", colors, label, size))

    def line(self, pts, color="#d62728", label=None, size=1.5):
        self.layers.append(Layer(np.asarray(pts, float), "line", color, label, size))

    def markers(self, pts, color="#0000ff", label=None, size=6.0):
        self.layers.append(Layer(np.asarray(pts, float), "marker", color, label, size))

    def _bounds(self):
        allpts = np.concatenate([l.points for l in self.layers if len(l.points)])
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        return lo - 0.05 * span, hi + 0.05 * span

    def to_svg(self) -> str:
        m = 40
        W, H = self.width, self.height
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
               f'viewBox="0 0 {W} {H}">', f'<rect width="{W}" height="{H}" fill="white"/>']
        if self.title:
            out.append(f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" '
                       f'font-size="13">{escape(self.title)}</text>')
        if not self.layers:
            out.append("</svg>")
            return "\n".join(out)
        lo, hi = self._bounds()

        def px(p):
            x = m + (p[..., 0] - lo[0]) / (hi[0] - lo[0]) * (W - 2 * m)
            y = H - m - (p[..., 1] - lo[1]) / (hi[1] - lo[1]) * (H - 2 * m)
            return x, y

        out.append(f'<rect x="{m}" y="{m}" width="{W - 2 * m}" height="{H - 2 * m}" fill="none" '
                   f'stroke="black" stroke-width="0.8"/>')
        for k in range(5):
            f = k / 4
            xv, yv = lo[0] + f * (hi[0] - lo[0]), lo[1] + f * (hi[1] - lo[1])
            xp, yp = m + f * (W - 2 * m), H - m - f * (H - 2 * m)
            out.append(f'<text x="{xp:.1f}" y="{H - m + 14}" text-anchor="middle" font-family="sans-serif" '
                       f'font-size="9">{xv:.3g}</text>')
            out.append(f'<text x="{m - 4}" y="{yp + 3:.1f}" text-anchor="end" font-family="sans-serif" '
                       f'font-size="9">{yv:.3g}</text>')
        legend = []
        for layer in self.layers:
            x, y = px(layer.points)
            if layer.kind == "line":
                pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))
                out.append(f'<polyline points="{pts}" fill="none" stroke="{layer.colors}" '
                           f'stroke-width="{layer.size}"/>')
            else:
                cols = layer.colors if isinstance(layer.colors, list) else [layer.colors] * len(x)
                for a, b, c in zip(x, y, cols):
                    if layer.kind == "marker":
                        s = layer.size
                        out.append(f'<path d="M{a - s:.2f},{b - s:.2f}L{a + s:.2f},{b + s:.2f}M{a - s:.2f},'
                                   f'{b + s:.2f}L{a + s:.2f},{b - s:.2f}" stroke="{c}" stroke-width="2"/>')
                    else:
                        out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="{layer.size}" fill="{c}"/>')
            if layer.label:
                legend.append((layer.label, layer.colors if isinstance(layer.colors, str) else "#444444"))
        for i, (label, color) in enumerate(legend):
            yy = m + 14 + 14 * i
            out.append(f'<rect x="{W - m - 110}" y="{yy - 8}" width="9" height="9" fill="{color}"/>')
            out.append(f'<text x="{W - m - 97}" y="{yy}" font-family="sans-serif" font-size="10">'
                       f'{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_svg())
