"""Minimal deterministic SVG emission for loss curves and per-concept bars.

Hand-rolled on purpose: output bytes depend only on the data, so plots can
participate in byte-identity checks alongside the other artifacts.
"""

from __future__ import annotations

from pathlib import Path

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _header(width: int, height: int, title: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="16" text-anchor="middle" font-family="monospace" '
        f'font-size="12">{title}</text>',
    ]


def line_chart(series: list, path: "str | Path", title: str = "", width: int = 640, height: int = 360) -> None:
    """Polyline chart; ``series`` is a list of (name, list-of-floats)."""
    pad, top = 48, 28
    plot_w, plot_h = width - 2 * pad, height - top - pad
    parts = _header(width, height, title)
    all_vals = [v for _, ys in series for v in ys if len(ys)]
    if all_vals:
        lo, hi = min(all_vals), max(all_vals)
        if hi - lo < 1e-12:
            hi = lo + 1.0
        n_max = max(len(ys) for _, ys in series)
        parts.append(
            f'<rect x="{pad}" y="{top}" width="{plot_w}" height="{plot_h}" '
            f'fill="none" stroke="#888"/>'
        )
        for idx, (name, ys) in enumerate(series):
            colour = _PALETTE[idx % len(_PALETTE)]
            if len(ys) == 0:
                continue
            pts = []
            for i, v in enumerate(ys):
                x = pad + (plot_w * i / max(1, n_max - 1))
                y = top + plot_h - plot_h * (v - lo) / (hi - lo)
                pts.append(f"{_fmt(x)},{_fmt(y)}")
            parts.append(
                f'<polyline fill="none" stroke="{colour}" stroke-width="1" '
                f'points="{" ".join(pts)}"/>'
            )
            parts.append(
                f'<text x="{pad + 4}" y="{top + 14 + 13 * idx}" font-family="monospace" '
                f'font-size="11" fill="{colour}">{name}</text>'
            )
        parts.append(
            f'<text x="{pad}" y="{height - 8}" font-family="monospace" font-size="10">'
            f"min={lo:.6g} max={hi:.6g} n={n_max}</text>"
        )
    path = Path(path)
    path.write_text("\n".join(parts + ["</svg>"]) + "\n")


def bar_chart(labels: list, values: list, path: "str | Path", title: str = "", width: int = 640, height: int = 360) -> None:
    """Vertical bars, one per label, values assumed in [0, 1]."""
    pad, top = 48, 28
    plot_w, plot_h = width - 2 * pad, height - top - pad
    parts = _header(width, height, title)
    n = max(1, len(labels))
    slot = plot_w / n
    bar_w = slot * 0.6
    parts.append(
        f'<rect x="{pad}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888"/>'
    )
    for i, (label, value) in enumerate(zip(labels, values)):
        v = min(max(float(value), 0.0), 1.0)
        x = pad + slot * i + (slot - bar_w) / 2
        h = plot_h * v
        y = top + plot_h - h
        colour = _PALETTE[i % len(_PALETTE)]
        parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w)}" height="{_fmt(h)}" '
            f'fill="{colour}"/>'
        )
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{height - pad + 14}" text-anchor="middle" '
            f'font-family="monospace" font-size="10">{label}</text>'
        )
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{_fmt(y - 4)}" text-anchor="middle" '
            f'font-family="monospace" font-size="10">{v:.3f}</text>'
        )
    path = Path(path)
    path.write_text("\n".join(parts + ["</svg>"]) + "\n")
