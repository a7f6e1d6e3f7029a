"""Standalone SVG 1.1 output for the TOC curve and the outcome histogram.

Only the two figures the command line emits are supported; there is no
general charting here.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=20, top=40, bottom=55)


def _frame(title, xlabel, ylabel):
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(title)}</text>',
        f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 16 {HEIGHT / 2:.1f})">{escape(ylabel)}</text>',
    ]


class _Scale:
    def __init__(self, lo, hi, a, b):
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi, self.a, self.b = lo, hi, a, b

    def __call__(self, v):
        return self.a + (np.asarray(v, dtype=float) - self.lo) / (self.hi - self.lo) * (self.b - self.a)


def _axes(xs: _Scale, ys: _Scale, n_ticks=5):
    left, bottom = MARGIN["left"], HEIGHT - MARGIN["bottom"]
    out = [
        f'<line x1="{left}" y1="{bottom}" x2="{WIDTH - MARGIN["right"]}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    for v in np.linspace(xs.lo, xs.hi, n_ticks):
        px = float(xs(v))
        out.append(f'<line x1="{px:.2f}" y1="{bottom}" x2="{px:.2f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{bottom + 18}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{v:.3g}</text>')
    for v in np.linspace(ys.lo, ys.hi, n_ticks):
        py = float(ys(v))
        out.append(f'<line x1="{left - 5}" y1="{py:.2f}" x2="{left}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py + 4:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{v:.3g}</text>')
    return out


def toc_svg(q, toc, se=None, title="Targeting Operator Characteristic") -> str:
    """Line plot of TOC(q) with optional 95% error bars (``1.96 * se``)."""
    q = np.asarray(q, dtype=float)
    toc = np.asarray(toc, dtype=float)
    half = np.zeros_like(toc) if se is None else 1.96 * np.asarray(se, dtype=float)
    xs = _Scale(0.0, 1.0, MARGIN["left"], WIDTH - MARGIN["right"])
    lo, hi = float(min(0.0, np.min(toc - half))), float(max(0.0, np.max(toc + half)))
    ys = _Scale(lo, hi, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    out = _frame(title, "q (treated fraction)", "TOC")
    out += _axes(xs, ys)
    zero = float(ys(0.0))
    out.append(f'<line x1="{MARGIN["left"]}" y1="{zero:.2f}" x2="{WIDTH - MARGIN["right"]}" '
               f'y2="{zero:.2f}" stroke="gray" stroke-dasharray="4 3"/>')
    if se is not None:
        for qi, ti, hi_ in zip(xs(q), toc, half):
            out.append(f'<line x1="{qi:.2f}" y1="{float(ys(ti - hi_)):.2f}" x2="{qi:.2f}" '
                       f'y2="{float(ys(ti + hi_)):.2f}" stroke="#9ecae1"/>')
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs(q), ys(toc)))
    out.append(f'<polyline points="{pts}" fill="none" stroke="#08519c" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_svg(spec, title="Recorded times by event status") -> str:
    """Stacked bars: events below, censored units on top."""
    edges = np.asarray(spec.bin_edges, dtype=float)
    ev = np.asarray(spec.counts_event)
    ce = np.asarray(spec.counts_censored)
    xs = _Scale(edges[0], edges[-1], MARGIN["left"], WIDTH - MARGIN["right"])
    ys = _Scale(0.0, float(max(1, (ev + ce).max())), HEIGHT - MARGIN["bottom"], MARGIN["top"])
    out = _frame(title, "recorded time", "count")
    out += _axes(xs, ys)
    for a, b, e, c in zip(edges[:-1], edges[1:], ev, ce):
        x0, x1 = float(xs(a)), float(xs(b))
        base = float(ys(0))
        top_e, top_c = float(ys(e)), float(ys(e + c))
        out.append(f'<rect x="{x0:.2f}" y="{top_e:.2f}" width="{x1 - x0:.2f}" '
                   f'height="{base - top_e:.2f}" fill="#3182bd" stroke="white"/>')
        out.append(f'<rect x="{x0:.2f}" y="{top_c:.2f}" width="{x1 - x0:.2f}" '
                   f'height="{top_e - top_c:.2f}" fill="#fd8d3c" stroke="white"/>')
    lx = WIDTH - MARGIN["right"] - 120
    for i, (label, colour) in enumerate((("event", "#3182bd"), ("censored", "#fd8d3c"))):
        y = MARGIN["top"] + 8 + 16 * i
        out.append(f'<rect x="{lx}" y="{y}" width="10" height="10" fill="{colour}"/>')
        out.append(f'<text x="{lx + 16}" y="{y + 9}" font-family="sans-serif" '
                   f'font-size="11">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
