"""Tiny SVG writer for line and scatter plots (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
W, H, PAD = 480, 320, 48


def _scale(lo: float, hi: float, a: float, b: float):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _frame(title: str, xlo, xhi, ylo, yhi) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{PAD}" y="{H - PAD + 14}" text-anchor="middle">{xlo:g}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 14}" text-anchor="middle">{xhi:g}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end">{ylo:.3g}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end">{yhi:.3g}</text>',
    ]
    return out


def line_plot(path, title: str, x, series: dict[str, list[float]]) -> None:
    ys = [v for s in series.values() for v in s]
    xlo, xhi = min(x), max(x)
    ylo, yhi = min(0.0, min(ys)), max(ys)
    sx, sy = _scale(xlo, xhi, PAD, W - PAD), _scale(ylo, yhi, H - PAD, PAD)
    out = _frame(title, xlo, xhi, ylo, yhi)
    for n, (name, s) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, s))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{W - PAD + 4 - 70}" y="{PAD + 14 * n}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def scatter_plot(path, title: str, x, y) -> None:
    hi = max(max(x), max(y)) or 1.0
    s = _scale(0.0, hi, PAD, W - PAD)
    sy = _scale(0.0, hi, H - PAD, PAD)
    out = _frame(title, 0, hi, 0.0, hi)
    out.append(f'<line x1="{s(0):.1f}" y1="{sy(0):.1f}" x2="{s(hi):.1f}" y2="{sy(hi):.1f}" stroke="#999" stroke-dasharray="4"/>')
    out.extend(f'<circle cx="{s(a):.1f}" cy="{sy(b):.1f}" r="2.5" fill="{PALETTE[0]}"/>' for a, b in zip(x, y))
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
