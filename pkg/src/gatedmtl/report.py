"""CSV tables, aligned text tables and the accuracy-vs-compute SVG scatter."""

from __future__ import annotations

import csv
import io
import math
from typing import Sequence
from xml.sax.saxutils import escape

from .metrics import ScoreTable, delta_mtl, mean_rank

SWEEP_FIXED_COLUMNS = ["lambda_s", "tau", "seed", "flops", "params", "delta_mtl"]


def fmt_tau(tau: Sequence[float]) -> str:
    return ";".join(repr(float(t)) for t in tau)


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_header(metric_keys: Sequence[str]) -> list[str]:
    return SWEEP_FIXED_COLUMNS + list(metric_keys)


def sweep_rows(records: Sequence[dict], metric_keys: Sequence[str]) -> list[list[str]]:
    """One row per record; failed cells keep their grid coordinates and leave
    the measured columns empty."""
    rows = []
    for r in records:
        ok = r.get("status") == "ok"
        row = [_num(float(r["lambda_s"])), fmt_tau(r["tau"]), str(r["seed"])]
        row += [_num(r.get(k)) if ok else "" for k in ("flops", "params", "delta_mtl")]
        row += [_num(r["metrics"][k]) if ok else "" for k in metric_keys]
        rows.append(row)
    return rows


def to_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_rows(table: ScoreTable, flops: dict[str, int] | None = None) -> tuple[list[str], list[list]]:
    """Method rows with per-task metrics, relative delta and mean rank."""
    ranks = mean_rank(table)
    has_base = table.baseline in table.rows
    header = ["method"] + list(table.tasks) + ["delta_mtl", "mean_rank"]
    if flops is not None:
        header.append("flops")
    rows = []
    for m in table.methods:
        d = delta_mtl(table, m) if has_base else None
        row = [m] + list(table.rows[m]) + [d, ranks[m]]
        if flops is not None:
            row.append(flops.get(m))
        rows.append(row)
    return header, rows


TEXT_FORMATS = {"delta_mtl": "{:+.2f}", "mean_rank": "{:.2f}", "flops": "{:,}"}


def aligned_text(header: Sequence[str], rows: Sequence[Sequence], formats: dict | None = None) -> str:
    """Fixed-width table; ``formats`` maps column names to format strings
    (floats default to 4 significant digits)."""
    formats = TEXT_FORMATS if formats is None else formats

    def cell(v, col):
        if v is None or v == "":
            return "-"
        if col in formats:
            return formats[col].format(v)
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    body = [[cell(v, h) for v, h in zip(r, header)] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG

WIDTH, HEIGHT = 800, 600
MARGIN = {"left": 80, "right": 30, "top": 40, "bottom": 70}


def nice_ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks, v = [], start
    while v <= hi + step * 1e-9:
        ticks.append(round(v, 12))
        v += step
    if ticks[-1] < hi:
        ticks.append(round(v, 12))
    return ticks


def _label(v: float) -> str:
    return f"{v:g}"


def pareto_svg(points: Sequence[tuple[float, float]], front: Sequence[tuple[float, float]],
               baselines: Sequence[tuple[str, float]] = (),
               x_label: str = "encoder GFLOPs (2 x MACs)", y_label: str = "delta vs single-task (%)") -> str:
    """Scatter of (x, y) points with the front joined by a polyline.

    ``baselines`` are drawn as labelled horizontal reference lines.
    """
    xs = [p[0] for p in points] or [0.0, 1.0]
    ys = [p[1] for p in points] + [b[1] for b in baselines] or [0.0, 1.0]
    xt, yt = nice_ticks(min(xs), max(xs)), nice_ticks(min(ys), max(ys))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return MARGIN["top"] + (y1 - v) / (y1 - y0) * ph

    out = ['<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
           '<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN" '
           '"http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<g font-family="sans-serif" font-size="12" fill="black">']
    bx, by = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
    out.append(f'<line x1="{bx}" y1="{MARGIN["top"]}" x2="{bx}" y2="{by}" stroke="black"/>')
    for v in xt:
        x = sx(v)
        out.append(f'<line x1="{x:.2f}" y1="{by}" x2="{x:.2f}" y2="{by + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{by + 20}" text-anchor="middle">{_label(v)}</text>')
    for v in yt:
        y = sy(v)
        out.append(f'<line x1="{bx - 5}" y1="{y:.2f}" x2="{bx}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{bx - 8}" y="{y + 4:.2f}" text-anchor="end">{_label(v)}</text>')
    out.append(f'<text x="{bx + pw / 2:.2f}" y="{HEIGHT - 20}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="20" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 20 {MARGIN["top"] + ph / 2:.2f})">{escape(y_label)}</text>')
    for name, v in baselines:
        y = sy(v)
        out.append(f'<line x1="{bx}" y1="{y:.2f}" x2="{bx + pw}" y2="{y:.2f}" stroke="gray" '
                   f'stroke-dasharray="6,4"/>')
        out.append(f'<text x="{bx + pw - 4}" y="{y - 4:.2f}" text-anchor="end" fill="gray">{escape(name)}</text>')
    if len(front) > 1:
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in front)
        out.append(f'<polyline points="{pts}" fill="none" stroke="firebrick" stroke-width="2"/>')
    for x, y in points:
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="steelblue"/>')
    for x, y in front:
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="5" fill="none" stroke="firebrick"/>')
    out += ["</g>", "</svg>"]
    return "\n".join(out) + "\n"


def load_schema(name: str) -> dict:
    """One of the JSON schemas shipped with the package, e.g. ``"sweep"``."""
    import json
    from importlib.resources import files

    return json.loads((files("gatedmtl") / "schemas" / f"{name}.schema.json").read_text())
