"""Minimal static SVG emission for 2D scatter, trajectory and loss plots."""
from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#7f7f7f", "#2ca02c", "#9467bd", "#ff7f0e")


@dataclass
class Layer:
    name: str
    kind: str                   # "points" | "segments" | "polyline"
    data: np.ndarray            # points (N, 2); segments (N, 2, 2); polyline (N, 2)
    color: str = PALETTE[0]
    size: float = 1.5
    opacity: float = 0.6


@dataclass
class Figure:
    width: int = 480
    height: int = 480
    margin: int = 40
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    layers: list = field(default_factory=list)

    def add(self, layer: Layer) -> "Figure":
        self.layers.append(layer)
        return self

    def _bounds(self):
        pts = np.concatenate([np.asarray(l.data, dtype=float).reshape(-1, 2) for l in self.layers])
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        lo, hi = pts.min(0), pts.max(0)
        pad = 0.05 * np.maximum(hi - lo, 1e-9)
        return lo - pad, hi + pad

    def render(self) -> str:
        lo, hi = self._bounds()
        m, w, h = self.margin, self.width, self.height

        def to_px(p):
            p = np.asarray(p, dtype=float)
            x = m + (p[..., 0] - lo[0]) / (hi[0] - lo[0]) * (w - 2 * m)
            y = h - m - (p[..., 1] - lo[1]) / (hi[1] - lo[1]) * (h - 2 * m)
            return x, y

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
               f'viewBox="0 0 {w} {h}">',
               f'<rect width="{w}" height="{h}" fill="white"/>',
               f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" '
               'fill="none" stroke="#333" stroke-width="0.8"/>']
        if self.title:
            out.append(f'<text x="{w / 2:.1f}" y="{m / 2:.1f}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="14">{escape(self.title)}</text>')
        if self.xlabel:
            out.append(f'<text x="{w / 2:.1f}" y="{h - 8}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="12">{escape(self.xlabel)}</text>')
        if self.ylabel:
            out.append(f'<text x="12" y="{h / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
                       f'font-size="12" transform="rotate(-90 12 {h / 2:.1f})">{escape(self.ylabel)}</text>')
        for tick in (lo, hi):
            tx, ty = to_px(tick)
            out.append(f'<text x="{tx:.1f}" y="{h - m + 14}" font-size="10" text-anchor="middle" '
                       f'font-family="sans-serif">{tick[0]:.3g}</text>')
            out.append(f'<text x="{m - 4}" y="{ty:.1f}" font-size="10" text-anchor="end" '
                       f'font-family="sans-serif">{tick[1]:.3g}</text>')
        for layer in self.layers:
            out.append(f'<g id="{escape(layer.name)}" class="layer" fill="{layer.color}" '
                       f'stroke="{layer.color}" opacity="{layer.opacity}">')
            data = np.asarray(layer.data, dtype=float)
            if layer.kind == "points":
                xs, ys = to_px(data)
                out += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{layer.size}" stroke="none"/>'
                        for x, y in zip(xs, ys)]
            elif layer.kind == "segments":
                xs, ys = to_px(data)
                out += [f'<line x1="{a:.2f}" y1="{b:.2f}" x2="{c:.2f}" y2="{d:.2f}" '
                        f'stroke-width="{layer.size / 2}"/>'
                        for (a, c), (b, d) in zip(xs, ys)]
            elif layer.kind == "polyline":
                xs, ys = to_px(data)
                pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
                out.append(f'<polyline points="{pts}" fill="none" stroke-width="{layer.size}"/>')
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            out.append("</g>")
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())


def transport_figure(x0, x1, n_traj: int = 64, title: str = "") -> Figure:
    """Source samples, transported samples, and straight segments for a subsample."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    k = min(n_traj, len(x0))
    fig = Figure(title=title)
    fig.add(Layer("p0", "points", x0, PALETTE[0]))
    fig.add(Layer("pushforward", "points", x1, PALETTE[1]))
    fig.add(Layer("trajectories", "segments", np.stack([x0[:k], x1[:k]], axis=1), PALETTE[2],
                  size=1.0, opacity=0.5))
    return fig


def loss_figure(iterations, values, title: str = "loss") -> Figure:
    pts = np.column_stack([np.asarray(iterations, float), np.asarray(values, float)])
    fig = Figure(width=560, height=360, title=title, xlabel="iteration", ylabel="loss")
    fig.add(Layer("loss", "polyline", pts, PALETTE[0], size=1.2, opacity=1.0))
    fig.add(Layer("loss-points", "points", pts, PALETTE[0], size=1.5, opacity=1.0))
    return fig
