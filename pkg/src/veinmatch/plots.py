"""Small, dependency-free SVG charts.

Output is a pure function of the inputs (fixed float formatting, no
timestamps or random ids), so identical runs produce identical files.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=24, top=40, bottom=56)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, body: list[str], xlabel: str = "", ylabel: str = "") -> str:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    parts += body
    if xlabel:
        parts.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        parts.append(f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return 0.0, 1.0
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _Axes:
    def __init__(self, xr: tuple[float, float], yr: tuple[float, float]):
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
        self.xr, self.yr = xr, yr

    def x(self, v: float) -> float:
        return self.x0 + (v - self.xr[0]) / (self.xr[1] - self.xr[0]) * (self.x1 - self.x0)

    def y(self, v: float) -> float:
        return self.y0 - (v - self.yr[0]) / (self.yr[1] - self.yr[0]) * (self.y0 - self.y1)

    def grid(self, ticks: int = 5) -> list[str]:
        out = [f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>',
               f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>']
        for i in range(ticks + 1):
            yv = self.yr[0] + (self.yr[1] - self.yr[0]) * i / ticks
            xv = self.xr[0] + (self.xr[1] - self.xr[0]) * i / ticks
            out.append(f'<text x="{self.x0 - 6}" y="{_f(self.y(yv) + 4)}" text-anchor="end">{yv:.3g}</text>')
            out.append(f'<text x="{_f(self.x(xv))}" y="{self.y0 + 18}" text-anchor="middle">{xv:.3g}</text>')
        return out


def line_chart(series: Mapping[str, Sequence[float]], title: str, xlabel: str = "epoch",
               ylabel: str = "") -> str:
    """One polyline per series, x = 1..n."""
    values = [v for s in series.values() for v in s if math.isfinite(v)]
    n = max((len(s) for s in series.values()), default=1)
    ax = _Axes((1.0, float(max(n, 2))), _nice_range(min(values, default=0.0), max(values, default=1.0)))
    body = ax.grid()
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_f(ax.x(i + 1))},{_f(ax.y(v))}" for i, v in enumerate(ys) if math.isfinite(v))
        if pts:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        body.append(f'<text x="{ax.x1 - 4}" y="{MARGIN["top"] + 14 * (k + 1)}" text-anchor="end" '
                    f'fill="{color}">{escape(name)}</text>')
    return _frame(title, body, xlabel, ylabel)


def score_scatter(scores: Sequence[float], same: Sequence[bool], alpha: float, title: str) -> str:
    """Pair scores in record order; colour marks whether the decision at ``alpha`` was right."""
    finite = [s for s in scores if math.isfinite(s)]
    ax = _Axes((0.0, float(max(len(scores) - 1, 1))), _nice_range(min(finite + [alpha]), max(finite + [alpha])))
    body = ax.grid()
    for i, (s, pos) in enumerate(zip(scores, same)):
        if not math.isfinite(s):
            continue
        correct = (s > alpha) == bool(pos)
        color = PALETTE[2] if correct else PALETTE[1]
        body.append(f'<circle cx="{_f(ax.x(i))}" cy="{_f(ax.y(s))}" r="1.6" fill="{color}"/>')
    body.append(f'<line x1="{ax.x0}" y1="{_f(ax.y(alpha))}" x2="{ax.x1}" y2="{_f(ax.y(alpha))}" '
                f'stroke="black" stroke-dasharray="4 3"/>')
    return _frame(title, body, "pair index", "cosine score")


def confusion_matrix(ca: int, wa: int, wr: int, cr: int, title: str = "Confusion matrix") -> str:
    cells = [("accepted", "same", ca), ("rejected", "same", wr),
             ("accepted", "different", wa), ("rejected", "different", cr)]
    total = max(ca + wa + wr + cr, 1)
    size, x0, y0 = 130, 200, 90
    body = [f'<text x="{x0 + size}" y="{y0 - 12}" text-anchor="middle">decision</text>',
            f'<text x="{x0 + size / 2}" y="{y0 + 2 * size + 20}" text-anchor="middle">accepted</text>',
            f'<text x="{x0 + 1.5 * size}" y="{y0 + 2 * size + 20}" text-anchor="middle">rejected</text>',
            f'<text x="{x0 - 8}" y="{y0 + size / 2}" text-anchor="end">same</text>',
            f'<text x="{x0 - 8}" y="{y0 + 1.5 * size}" text-anchor="end">different</text>']
    for decision, truth, count in cells:
        cx = x0 + (0 if decision == "accepted" else size)
        cy = y0 + (0 if truth == "same" else size)
        shade = int(255 - 180 * count / total)
        body.append(f'<rect x="{cx}" y="{cy}" width="{size}" height="{size}" '
                    f'fill="rgb({shade},{shade},255)" stroke="black"/>')
        body.append(f'<text x="{cx + size / 2}" y="{cy + size / 2 + 5}" text-anchor="middle" '
                    f'font-size="16">{count}</text>')
    return _frame(title, body)


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str = "") -> str:
    ax = _Axes((0.0, float(max(len(values), 1))), (0.0, max(max(values, default=1.0), 1e-9) * 1.1))
    body = ax.grid()
    width = (ax.x1 - ax.x0) / max(len(values), 1)
    for i, (lab, v) in enumerate(zip(labels, values)):
        top = ax.y(v)
        body.append(f'<rect x="{_f(ax.x0 + i * width + width * 0.15)}" y="{_f(top)}" '
                    f'width="{_f(width * 0.7)}" height="{_f(ax.y0 - top)}" fill="{PALETTE[0]}"/>')
        body.append(f'<text x="{_f(ax.x0 + (i + 0.5) * width)}" y="{_f(top - 4)}" '
                    f'text-anchor="middle">{v:.4f}</text>')
        body.append(f'<text x="{_f(ax.x0 + (i + 0.5) * width)}" y="{ax.y0 + 34}" '
                    f'text-anchor="middle">{escape(str(lab))}</text>')
    return _frame(title, body, "", ylabel)


def latency_trace(latencies: Sequence[float], title: str = "Per-pair latency") -> str:
    return line_chart({"seconds": list(latencies)}, title, xlabel="pair", ylabel="seconds")


def write_svg(path, svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    return path
