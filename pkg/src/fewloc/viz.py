"""Deterministic SVG rendering of per-class attention masks, thresholds,
predicted segments and ground truth for one query video. Text output only;
no plotting dependency.
"""

from __future__ import annotations

import numpy as np

ROW_H = 64
STRIP_H = 16
BAND_H = 7
LEFT = 120
RIGHT = 20
TOP = 28
CELL_W = 14


def _f(x: float) -> str:
    return f"{x:.2f}"


def _heat_color(u: float) -> str:
    # dark blue -> warm yellow ramp
    u = min(max(u, 0.0), 1.0)
    r = int(round(30 + 225 * u))
    g = int(round(40 + 180 * u))
    b = int(round(90 + 40 * (1 - u)))
    return f"rgb({r},{g},{b})"


def render_localization_svg(
    video_id: str,
    class_names: list,
    raw_attn: np.ndarray,
    deltas: list,
    predictions: list,
    gt_segments: list | None = None,
) -> str:
    """raw_attn is (N, C); deltas one threshold per class; predictions a list
    per class of (start, end) inclusive snippet runs; gt_segments optional
    (class_index, start, end) in snippet units (end exclusive, floats)."""
    raw_attn = np.asarray(raw_attn, dtype=np.float64)
    n, c = raw_attn.shape
    if len(class_names) != c or len(deltas) != c or len(predictions) != c:
        raise ValueError("class_names, deltas and predictions must have one entry per class")
    width = LEFT + n * CELL_W + RIGHT
    height = TOP + c * ROW_H + 12
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="{LEFT}" y="16">attention masks: {video_id} ({n} snippets)</text>',
    ]
    gt_by_class = {}
    for ci, s, e in gt_segments or []:
        gt_by_class.setdefault(ci, []).append((s, e))
    for ci in range(c):
        y0 = TOP + ci * ROW_H
        col = raw_attn[:, ci]
        lo, hi = float(col.min()), float(col.max())
        span = hi - lo if hi > lo else 1.0
        out.append(f'<text x="6" y="{y0 + 24}">{class_names[ci]}</text>')
        # heat strip
        for i in range(n):
            u = (float(col[i]) - lo) / span
            x = LEFT + i * CELL_W
            out.append(
                f'<rect x="{x}" y="{y0 + 12}" width="{CELL_W}" height="{STRIP_H}" '
                f'fill="{_heat_color(u)}"/>'
            )
        # threshold position within the strip rendered as a tick row: mark
        # snippets above the threshold
        delta = deltas[ci]
        for i in range(n):
            if col[i] > delta:
                x = LEFT + i * CELL_W
                out.append(
                    f'<rect x="{x}" y="{y0 + 10}" width="{CELL_W}" height="2" fill="#222222"/>'
                )
        out.append(
            f'<text x="{LEFT + n * CELL_W + 4}" y="{y0 + 24}">d={_f(delta)}</text>'
        )
        # predicted segments band
        for s, e in predictions[ci]:
            x = LEFT + s * CELL_W
            w = (e - s + 1) * CELL_W
            out.append(
                f'<rect x="{x}" y="{y0 + 32}" width="{w}" height="{BAND_H}" fill="#d62728"/>'
            )
        out.append(f'<text x="6" y="{y0 + 39}">pred</text>')
        # ground-truth band (when present)
        if gt_by_class.get(ci):
            for s, e in gt_by_class[ci]:
                x = LEFT + s * CELL_W
                w = (e - s) * CELL_W
                out.append(
                    f'<rect x="{_f(x)}" y="{y0 + 43}" width="{_f(w)}" height="{BAND_H}" fill="#2ca02c"/>'
                )
            out.append(f'<text x="6" y="{y0 + 50}">gt</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
