"""Dependency-free SVG figures and report tables.

Every figure embeds a provenance comment and its underlying data is
also written as CSV, so no plotted point exists without a diffable
source row.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

from . import analysis
from .trainer import RunLog

_W, _H = 640, 440
_ML, _MR, _MT, _MB = 70, 20, 30, 50  # margins


def _log_ticks(lo: float, hi: float) -> list[float]:
    lo_e = math.floor(math.log10(lo))
    hi_e = math.ceil(math.log10(hi))
    return [10.0 ** e for e in range(lo_e, hi_e + 1)
            if lo <= 10.0 ** e <= hi]


def _lin_ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    while first <= hi + 1e-12:
        out.append(first)
        first += step
    return out


def scatter_svg(points: Sequence[tuple[float, float]], xlabel: str,
                ylabel: str, title: str, provenance: str,
                curve: Sequence[tuple[float, float]] = (),
                log_x: bool = True) -> str:
    """Scatter plot (optionally with a fitted curve) as an SVG string."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_lo == x_hi:
        x_lo, x_hi = x_lo * 0.9, x_hi * 1.1 or 1.0
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        if log_x:
            f = (math.log10(x) - math.log10(x_lo)) / \
                (math.log10(x_hi) - math.log10(x_lo))
        else:
            f = (x - x_lo) / (x_hi - x_lo)
        return _ML + f * (_W - _ML - _MR)

    def sy(y):
        f = (y - y_lo) / (y_hi - y_lo)
        return _H - _MB - f * (_H - _MT - _MB)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
             f'height="{_H}" viewBox="0 0 {_W} {_H}">',
             f"<!-- provenance: {provenance} -->",
             f'<rect width="{_W}" height="{_H}" fill="white"/>',
             f'<text x="{_W / 2:.0f}" y="18" text-anchor="middle" '
             f'font-size="14">{title}</text>']
    # axes
    parts.append(f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" '
                 f'y2="{_H - _MB}" stroke="black"/>')
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" '
                 f'stroke="black"/>')
    xticks = _log_ticks(x_lo, x_hi) if log_x else _lin_ticks(x_lo, x_hi)
    for t in xticks:
        parts.append(f'<line x1="{sx(t):.1f}" y1="{_H - _MB}" '
                     f'x2="{sx(t):.1f}" y2="{_H - _MB + 5}" stroke="black"/>')
        parts.append(f'<text x="{sx(t):.1f}" y="{_H - _MB + 18}" '
                     f'text-anchor="middle" font-size="10">{t:.3g}</text>')
    for t in _lin_ticks(y_lo, y_hi):
        parts.append(f'<line x1="{_ML - 5}" y1="{sy(t):.1f}" x2="{_ML}" '
                     f'y2="{sy(t):.1f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 8}" y="{sy(t) + 3:.1f}" '
                     f'text-anchor="end" font-size="10">{t:.3g}</text>')
    parts.append(f'<text x="{(_ML + _W - _MR) / 2:.0f}" y="{_H - 10}" '
                 f'text-anchor="middle" font-size="12">{xlabel}</text>')
    parts.append(f'<text x="16" y="{(_MT + _H - _MB) / 2:.0f}" '
                 f'text-anchor="middle" font-size="12" transform="rotate(-90 '
                 f'16 {(_MT + _H - _MB) / 2:.0f})">{ylabel}</text>')
    if curve:
        path = " ".join(f"{'M' if i == 0 else 'L'}{sx(x):.1f},{sy(y):.1f}"
                        for i, (x, y) in enumerate(curve))
        parts.append(f'<path d="{path}" fill="none" stroke="black" '
                     f'stroke-width="1.5"/>')
    for x, y in points:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3.5" '
                     f'fill="seagreen" fill-opacity="0.8"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def _fit_curve(fit: analysis.PowerFit, n: int = 100):
    lo, hi = fit.domain
    pts = []
    for i in range(n):
        x = lo * (hi / lo) ** (i / (n - 1))
        pts.append((x, float(fit.predict(x))))
    return pts


def render_report(runs: Sequence[RunLog], out_dir, n_bins: int = 32) -> dict:
    """Emit frontier tables, power fits, and the three standard figures.

    Returns a manifest of written paths. Every figure's data is also
    emitted as CSV next to it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frontier = analysis.compute_optimal_frontier(runs, n_bins=n_bins)
    frontier_csv = out / "frontier.csv"
    with open(frontier_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "flops", "loss", "run_id", "step",
                    "model_size", "tokens_seen"])
        for p in frontier:
            w.writerow([p.flops_bin[0], p.flops_bin[1], p.flops, p.loss,
                        p.source[0], p.source[1], *p.covariates])

    manifest = {"frontier_csv": str(frontier_csv), "figures": [],
                "fits": {}}
    views = [("flops", "FLOPs", [(p.flops, p.loss) for p in frontier]),
             ("tokens", "tokens seen",
              [(p.covariates[1], p.loss) for p in frontier
               if p.covariates[1] > 0]),
             ("params", "model parameters",
              [(p.covariates[0], p.loss) for p in frontier]),
             ]
    for key, label, pts in views:
        if len(pts) < 3:
            continue
        data_csv = out / f"loss_vs_{key}.csv"
        with open(data_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([key, "loss"])
            w.writerows(pts)
        try:
            fit = analysis.fit_power_law(pts)
            fit_json = out / f"fit_{key}.json"
            with open(fit_json, "w") as f:
                json.dump(fit.to_dict(), f, indent=2)
            manifest["fits"][key] = str(fit_json)
            curve = _fit_curve(fit)
        except ValueError:
            curve = []
        svg = scatter_svg(pts, xlabel=label, ylabel="eval MLM loss",
                          title=f"Compute-optimal loss vs {label}",
                          provenance=f"data: {data_csv.name}", curve=curve)
        svg_path = out / f"loss_vs_{key}.svg"
        svg_path.write_text(svg)
        manifest["figures"].append(str(svg_path))
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest
