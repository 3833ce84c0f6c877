"""Dependency-free SVG polar plots of laser scans."""
from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError


def polar_overlay_svg(
    scan,
    predicted=None,
    fov=math.pi / 2,
    heading=0.0,
    max_range=30.0,
    plot_range=None,
    size=640,
    rings=(1.0, 2.0, 5.0, 10.0),
):
    """Robot-centered polar overlay: raw scan, and optionally the inferred
    obstacle-distance scan on top of it.  Returns SVG text.

    `plot_range` sets the radius mapped to the plot edge (defaults to the
    largest finite ring or the 95th percentile of the data, whichever is
    bigger) so near-field structure stays visible at 30 m range limits.
    """
    scan = np.asarray(scan, dtype=np.float64).ravel()
    if scan.size < 2:
        raise ShapeError("need at least two rays to plot")
    series = [("scan", "#2a9d2a", scan)]
    if predicted is not None:
        predicted = np.asarray(predicted, dtype=np.float64).ravel()
        if predicted.shape != scan.shape:
            raise ShapeError(f"predicted shape {predicted.shape} != scan shape {scan.shape}")
        series.append(("predicted", "#d62728", predicted))

    if plot_range is None:
        visible = min(max_range, float(np.percentile(np.concatenate([s for _, _, s in series]), 95)))
        plot_range = max(max(rings), visible, 1.0)
    cx = cy = size / 2.0
    k = (size / 2.0 - 20.0) / plot_range

    angles = heading + np.linspace(-fov / 2.0, fov / 2.0, scan.size)

    def to_xy(r):
        r = np.minimum(r, plot_range)
        return cx + r * k * np.cos(angles), cy - r * k * np.sin(angles)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for ring in rings:
        if ring <= plot_range:
            parts.append(
                f'<circle cx="{cx}" cy="{cy}" r="{ring * k:.2f}" fill="none" '
                'stroke="#cccccc" stroke-width="1"/>'
            )
            parts.append(
                f'<text x="{cx + ring * k + 3:.1f}" y="{cy - 3:.1f}" font-size="10" '
                f'fill="#888888">{ring:g} m</text>'
            )
    for name, color, values in series:
        xs, ys = to_xy(values)
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" '
            f'stroke-width="2" data-series="{name}"/>'
        )
    parts.append(f'<circle cx="{cx}" cy="{cy}" r="4" fill="#333333"/>')
    for i, (name, color, _) in enumerate(series):
        y = 20 + 16 * i
        parts.append(f'<rect x="16" y="{y - 9}" width="12" height="3" fill="{color}"/>')
        parts.append(f'<text x="34" y="{y}" font-size="12" fill="#333333">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
