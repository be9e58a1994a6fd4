"""Minimal static SVG line chart for learning curves."""

from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _smooth(ys: Sequence[float], window: int) -> list[float]:
    if window <= 1:
        return list(ys)
    out, acc = [], 0.0
    for i, y in enumerate(ys):
        acc += y
        if i >= window:
            acc -= ys[i - window]
        out.append(acc / min(i + 1, window))
    return out


def line_chart(
    series: Mapping[str, Sequence[float]],
    title: str = "",
    xlabel: str = "episode",
    ylabel: str = "return",
    width: int = 640,
    height: int = 400,
    smooth: int = 1,
) -> str:
    """Render named series as polylines; output depends only on the inputs."""
    left, right, top, bottom = 64, 150, 32, 48
    pw, ph = width - left - right, height - top - bottom
    data = {k: _smooth(list(v), smooth) for k, v in series.items() if len(v)}
    n = max((len(v) for v in data.values()), default=1)
    lo = min((min(v) for v in data.values()), default=0.0)
    hi = max((max(v) for v in data.values()), default=1.0)
    if hi == lo:
        hi, lo = hi + 1.0, lo - 1.0

    def sx(i: int) -> float:
        return left + pw * (i / max(n - 1, 1))

    def sy(y: float) -> float:
        return top + ph * (1.0 - (y - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(5):
        y = lo + (hi - lo) * k / 4
        parts.append(
            f'<text x="{left - 6}" y="{sy(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.0f}</text>'
        )
        x = (n - 1) * k / 4
        parts.append(
            f'<text x="{sx(int(round(x))):.1f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{x:.0f}</text>'
        )
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    parts.append(
        f'<text x="14" y="{top + ph / 2:.1f}" transform="rotate(-90 14 {top + ph / 2:.1f})" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(ylabel)}</text>'
    )
    for j, (name, ys) in enumerate(data.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{sx(i):.1f},{sy(y):.1f}" for i, y in enumerate(ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        ly = top + 14 * j + 8
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-family="sans-serif" font-size="10">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
