"""Minimal SVG scatter plots, one colour per class."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import CLASSES

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def scatter_svg(path, xy, labels, title="", xlabel="", ylabel="", size=480, radius=2.0):
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    labels = np.asarray(labels)
    margin = 40
    span = size - 2 * margin
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    scale = np.where(hi > lo, hi - lo, 1.0)
    px = margin + (xy - lo) / scale * span
    px[:, 1] = size - px[:, 1]  # svg y grows downward

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 90}" height="{size}" '
             f'viewBox="0 0 {size + 90} {size}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
             f'<text x="12" y="{size / 2:.1f}" font-size="11" transform="rotate(-90 12 {size / 2:.1f})" '
             f'text-anchor="middle">{ylabel}</text>']
    for c in CLASSES:
        pts = px[labels == c.index]
        if not len(pts):
            continue
        parts.append(f'<g fill="{PALETTE[c.index]}" fill-opacity="0.6">')
        parts.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius}"/>' for x, y in pts)
        parts.append("</g>")
    for row, c in enumerate(CLASSES):
        y = margin + 16 * row
        parts.append(f'<circle cx="{size + 10}" cy="{y}" r="4" fill="{PALETTE[c.index]}"/>')
        parts.append(f'<text x="{size + 20}" y="{y + 4}" font-size="11">{c.acronym}</text>')
    parts.append("</svg>\n")
    Path(path).write_text("\n".join(parts))
