"""Standalone SVG line plots (no plotting library needed)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..engines import TRACE_COLUMNS

WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 80, 170, 30, 55
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _log_default(metric: str) -> bool:
    return metric == "residual" or metric.endswith("_error")


def _nice_ticks(lo, hi, count=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt_tick(v):
    return f"{v:.6g}"


def export_svg(traces, x_metric: str, y_metric: str, path, labels=None, log_y=None,
               title: str | None = None) -> Path:
    """Plot ``y_metric`` against ``x_metric``, one polyline per trace.

    A log-scale y axis (the default for residual and error metrics) gets one
    tick per decade. Nonpositive values are left out of log plots.

    Raises
    ------
    ValueError
        On an unknown metric or when no trace has a plottable point.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    for m in (x_metric, y_metric):
        if m not in TRACE_COLUMNS:
            raise ValueError(f"unknown metric {m!r}; expected one of {TRACE_COLUMNS}")
    log_y = _log_default(y_metric) if log_y is None else log_y
    labels = list(labels) if labels is not None else [f"run {k}" for k in range(len(traces))]
    if len(labels) != len(traces):
        raise ValueError("one label per trace is required")

    series = []
    for tr in traces:
        cols = tr.columns if hasattr(tr, "columns") else tr
        xs = np.asarray(cols[x_metric], dtype=float)
        ys = np.asarray(cols[y_metric], dtype=float)
        ok = np.isfinite(xs) & np.isfinite(ys)
        if log_y:
            ok &= ys > 0
        series.append((xs[ok], np.log10(ys[ok]) if log_y else ys[ok]))
    if not any(s[0].size for s in series):
        raise ValueError(f"empty {y_metric} series")

    allx = np.concatenate([s[0] for s in series])
    ally = np.concatenate([s[1] for s in series])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if log_y:
        y0, y1 = math.floor(y0), math.ceil(y1)
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 <= y0:
        pad = 1.0 if log_y else max(abs(y0) * 0.1, 0.5)
        y0, y1 = y0 - pad, y1 + pad

    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return TOP + (y1 - v) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.1f}" y="18" text-anchor="middle" '
                   f'font-size="13">{escape(title)}</text>')
    if log_y:
        step = max(1, math.ceil((y1 - y0) / 12))
        yt = [float(e) for e in range(int(y0), int(y1) + 1, step)]
    else:
        yt = _nice_ticks(y0, y1)
    for v in yt:
        y = sy(v)
        text = f"1e{int(v)}" if log_y else _fmt_tick(v)
        out.append(f'<line x1="{LEFT}" y1="{y:.2f}" x2="{LEFT + pw}" y2="{y:.2f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text class="ytick" x="{LEFT - 6}" y="{y + 4:.2f}" '
                   f'text-anchor="end">{text}</text>')
    for v in _nice_ticks(x0, x1):
        x = sx(v)
        out.append(f'<line x1="{x:.2f}" y1="{TOP + ph}" x2="{x:.2f}" y2="{TOP + ph + 5}" '
                   f'stroke="black"/>')
        out.append(f'<text class="xtick" x="{x:.2f}" y="{TOP + ph + 18}" '
                   f'text-anchor="middle">{_fmt_tick(v)}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">'
               f'{escape(x_metric)}</text>')
    ylab = f"{y_metric} (log scale)" if log_y else y_metric
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(ylab)}</text>')
    for k, ((xs, ys), lab) in enumerate(zip(series, labels)):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 14 + 18 * k
        lx = LEFT + pw + 12
        out.append(f'<g class="legend"><line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>'
                   f'<text x="{lx + 28}" y="{ly + 4}">{escape(str(lab))}</text></g>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path
