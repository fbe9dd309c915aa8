"""Static SVG line charts for learning curves and FROC curves.

The output depends only on the inputs (no timestamps, no random ids), so
identical CSVs always give byte-identical files.
"""

from __future__ import annotations

import math
from html import escape
from pathlib import Path
from typing import Sequence

from .metrics import FROC_RATES, FrocCurve, MetricsLog, froc_score

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=170, top=40, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

Series = tuple[str, Sequence[float], Sequence[float]]


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if abs(v) < 1e4 else f"{v:.3g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out, v = [], start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def line_chart(
    series: Sequence[Series],
    title: str,
    xlabel: str,
    ylabel: str,
    log2_x: bool = False,
    y_range: tuple[float, float] | None = None,
    x_ticks: Sequence[float] | None = None,
    annotations: Sequence[str] = (),
    markers: bool = False,
) -> str:
    if not series or not any(len(xs) for _, xs, _ in series):
        raise ValueError("nothing to plot")
    tx = (lambda v: math.log2(v)) if log2_x else (lambda v: v)
    pts = [(tx(x), y) for _, xs, ys in series for x, y in zip(xs, ys) if not (log2_x and x <= 0)]
    finite = [(x, y) for x, y in pts if math.isfinite(x) and math.isfinite(y)]
    if not finite:
        raise ValueError("no finite points to plot")
    x0, x1 = min(p[0] for p in finite), max(p[0] for p in finite)
    if x_ticks:
        x0, x1 = min(x0, tx(min(x_ticks))), max(x1, tx(max(x_ticks)))
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = y_range or (min(p[1] for p in finite), max(p[1] for p in finite))
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v: float) -> float:
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def sy(v: float) -> float:
        return MARGIN["top"] + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    xt = [tx(v) for v in x_ticks] if x_ticks else _ticks(x0, x1)
    labels = [_fmt(v) for v in x_ticks] if x_ticks else [_fmt(v) for v in xt]
    for v, lab in zip(xt, labels):
        if x0 - 1e-9 <= v <= x1 + 1e-9:
            x = sx(v)
            out.append(f'<line x1="{x:.1f}" y1="{MARGIN["top"] + ph}" x2="{x:.1f}" y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{x:.1f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">{lab}</text>')
    for v in _ticks(y0, y1):
        if y0 - 1e-9 <= v <= y1 + 1e-9:
            y = sy(v)
            out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{y:.1f}" x2="{MARGIN["left"]}" y2="{y:.1f}" stroke="black"/>')
            out.append(f'<line x1="{MARGIN["left"]}" y1="{y:.1f}" x2="{MARGIN["left"] + pw}" y2="{y:.1f}" stroke="#e0e0e0"/>')
            out.append(f'<text x="{MARGIN["left"] - 8}" y="{y + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')

    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = [(sx(tx(x)), sy(y)) for x, y in zip(xs, ys)
                  if math.isfinite(y) and not (log2_x and x <= 0)]
        if coords:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in coords)
            out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
            if markers:
                out.extend(f'<circle class="point" cx="{x:.1f}" cy="{y:.1f}" r="3.5" fill="{color}"/>' for x, y in coords)
        ly = MARGIN["top"] + 14 + 18 * i
        lx = MARGIN["left"] + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(name)}</text>')
    for j, note in enumerate(annotations):
        y = MARGIN["top"] + 14 + 18 * (len(series) + j + 1)
        out.append(f'<text class="annotation" x="{MARGIN["left"] + pw + 12}" y="{y}">{escape(note)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def learning_curve_svg(logs: Sequence[tuple[str, MetricsLog]], metric: str = "val_dsc") -> str:
    """One series per log; the x axis is the cumulative epoch across rounds."""
    series = []
    for name, log in logs:
        ys = log.column(metric)
        series.append((name, list(range(1, len(ys) + 1)), ys))
    label = {"val_dsc": "validation DSC", "val_sens": "validation sensitivity"}.get(metric, metric)
    return line_chart(series, f"Learning curve: {label}", "epoch", label)


def froc_svg(curves: Sequence[tuple[str, FrocCurve]], rates: Sequence[float] = FROC_RATES) -> str:
    """Sensitivity read at each FP/scan rate, one series per curve, with the mean as annotation."""
    series, notes = [], []
    for name, curve in curves:
        sens = [curve.sensitivity_at(r) for r in rates]
        series.append((name, list(rates), sens))
        notes.append(f"{name}: score {froc_score(curve, rates):.3f}")
    return line_chart(series, "FROC", "false positives per scan", "sensitivity", log2_x=True,
                      y_range=(0.0, 1.0), x_ticks=rates, annotations=notes, markers=True)


def write_svg(text: str, path) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".part")
    tmp.write_text(text)
    tmp.replace(p)
