"""Minimal static SVG charts: box plots and grouped bars."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 40, 70
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, title: str, header: str | None):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">'
        ]
        if header:
            self.parts.append(f"<!-- {escape(header)} -->")
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.parts.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')

    def add(self, s: str):
        self.parts.append(s)

    def axis(self, lo: float, hi: float, label: str):
        x0, y0, y1 = LEFT, HEIGHT - BOTTOM, TOP
        self.add(f'<line x1="{x0}" y1="{y0}" x2="{WIDTH - RIGHT}" y2="{y0}" stroke="black"/>')
        self.add(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for v in np.linspace(lo, hi, 5):
            y = self.y(v, lo, hi)
            self.add(f'<line x1="{x0 - 4}" y1="{_fmt(y)}" x2="{x0}" y2="{_fmt(y)}" stroke="black"/>')
            self.add(f'<text x="{x0 - 6}" y="{_fmt(y + 4)}" text-anchor="end">{v:.3g}</text>')
        self.add(f'<text x="14" y="{(y0 + y1) / 2}" transform="rotate(-90 14 {(y0 + y1) / 2})" '
                 f'text-anchor="middle">{escape(label)}</text>')

    @staticmethod
    def y(v: float, lo: float, hi: float) -> float:
        span = hi - lo if hi > lo else 1.0
        return HEIGHT - BOTTOM - (v - lo) / span * (HEIGHT - BOTTOM - TOP)

    def xlabel(self, x: float, text: str):
        self.add(f'<text x="{_fmt(x)}" y="{HEIGHT - BOTTOM + 16}" text-anchor="middle">{escape(text)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _range(values) -> tuple[float, float]:
    vals = [v for v in values if np.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(0.0, min(vals)), max(vals)
    return lo, hi if hi > lo else lo + 1.0


def box_plot(groups: dict[str, list[float]], title: str, ylabel: str, header: str | None = None) -> str:
    """One box (quartiles, whiskers at min/max) per named group."""
    c = _Canvas(title, header)
    lo, hi = _range([v for vs in groups.values() for v in vs])
    c.axis(lo, hi, ylabel)
    n = max(len(groups), 1)
    slot = (WIDTH - LEFT - RIGHT) / n
    for i, (name, vs) in enumerate(groups.items()):
        cx = LEFT + slot * (i + 0.5)
        c.xlabel(cx, name)
        if not vs:
            continue
        q0, q1, q2, q3, q4 = np.percentile(vs, [0, 25, 50, 75, 100])
        w = min(slot * 0.5, 40)
        ys = [c.y(q, lo, hi) for q in (q0, q1, q2, q3, q4)]
        color = PALETTE[i % len(PALETTE)]
        c.add(f'<line x1="{_fmt(cx)}" y1="{_fmt(ys[0])}" x2="{_fmt(cx)}" y2="{_fmt(ys[4])}" stroke="black"/>')
        c.add(f'<rect x="{_fmt(cx - w / 2)}" y="{_fmt(ys[3])}" width="{_fmt(w)}" '
              f'height="{_fmt(max(ys[1] - ys[3], 0.5))}" fill="{color}" stroke="black"/>')
        c.add(f'<line x1="{_fmt(cx - w / 2)}" y1="{_fmt(ys[2])}" x2="{_fmt(cx + w / 2)}" y2="{_fmt(ys[2])}" '
              f'stroke="black" stroke-width="2"/>')
    return c.render()


def bar_chart(categories: list[str], series: dict[str, list[float]], title: str, ylabel: str,
              header: str | None = None) -> str:
    """Grouped bars: one group per category, one bar per series."""
    c = _Canvas(title, header)
    lo, hi = _range([v for vs in series.values() for v in vs])
    c.axis(lo, hi, ylabel)
    n = max(len(categories), 1)
    slot = (WIDTH - LEFT - RIGHT) / n
    k = max(len(series), 1)
    bw = slot * 0.8 / k
    for i, cat in enumerate(categories):
        x0 = LEFT + slot * i + slot * 0.1
        c.xlabel(LEFT + slot * (i + 0.5), cat)
        for j, (name, vs) in enumerate(series.items()):
            v = vs[i]
            if not np.isfinite(v):
                continue
            y, yb = c.y(v, lo, hi), c.y(max(lo, 0.0), lo, hi)
            c.add(f'<rect x="{_fmt(x0 + j * bw)}" y="{_fmt(min(y, yb))}" width="{_fmt(bw)}" '
                  f'height="{_fmt(abs(yb - y))}" fill="{PALETTE[j % len(PALETTE)]}"/>')
    for j, name in enumerate(series):
        x = LEFT + j * 120
        c.add(f'<rect x="{x}" y="{HEIGHT - 30}" width="10" height="10" fill="{PALETTE[j % len(PALETTE)]}"/>')
        c.add(f'<text x="{x + 14}" y="{HEIGHT - 21}">{escape(name)}</text>')
    return c.render()
