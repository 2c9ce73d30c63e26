"""Minimal hand-rolled SVG output: labeled scatter plots and step curves.

Everything is written with fixed float formatting and no timestamps, so the
same data always produces byte-identical files.
"""

from __future__ import annotations

import numpy as np

__all__ = ["scatter_svg", "km_curves_svg"]

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(x: float) -> str:
    return format(float(x), ".4f")


def _scale(values: np.ndarray, out_lo: float, out_hi: float) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.full_like(values, 0.5 * (out_lo + out_hi))
    return out_lo + (values - lo) * (out_hi - out_lo) / (hi - lo)


def scatter_svg(points: np.ndarray, labels, path, width: int = 800, height: int = 640) -> None:
    """One circle plus text label per point."""
    margin = 40.0
    xs = _scale(points[:, 0], margin, width - margin)
    ys = _scale(points[:, 1], height - margin, margin)  # svg y axis points down
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for label, x, y in zip(labels, xs, ys):
        parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="#1f77b4"/>')
        parts.append(
            f'<text x="{_fmt(x + 4)}" y="{_fmt(y - 3)}" font-size="8" '
            f'font-family="sans-serif">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def km_curves_svg(curves: dict, max_time: float, path,
                  width: int = 800, height: int = 640) -> None:
    """Step-function survival curves, one color per subgroup, with a legend.

    ``curves`` maps subgroup label -> KmCurve.
    """
    margin = 50.0
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    max_time = max(float(max_time), 1e-12)

    def sx(t: float) -> float:
        return margin + (t / max_time) * plot_w

    def sy(s: float) -> float:
        return margin + (1.0 - s) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{_fmt(margin)}" y1="{_fmt(margin)}" x2="{_fmt(margin)}" '
        f'y2="{_fmt(height - margin)}" stroke="black"/>',
        f'<line x1="{_fmt(margin)}" y1="{_fmt(height - margin)}" '
        f'x2="{_fmt(width - margin)}" y2="{_fmt(height - margin)}" stroke="black"/>',
        '<text x="10" y="20" font-size="12" font-family="sans-serif">survival probability</text>',
        f'<text x="{_fmt(width - margin - 60)}" y="{_fmt(height - 10)}" font-size="12" '
        f'font-family="sans-serif">years</text>',
    ]
    for i, (label, curve) in enumerate(sorted(curves.items(), key=lambda kv: str(kv[0]))):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(0.0, 1.0)]
        s_prev = 1.0
        for t, s in zip(curve.times, curve.survival):
            pts.append((float(t), s_prev))
            pts.append((float(t), float(s)))
            s_prev = float(s)
        pts.append((max_time, s_prev))
        coords = " ".join(f"{_fmt(sx(t))},{_fmt(sy(s))}" for t, s in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = margin + 16 * i
        parts.append(
            f'<rect x="{_fmt(width - margin - 120)}" y="{_fmt(ly)}" width="12" height="8" '
            f'fill="{color}"/>'
        )
        parts.append(
            f'<text x="{_fmt(width - margin - 102)}" y="{_fmt(ly + 8)}" font-size="11" '
            f'font-family="sans-serif">subgroup {label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
