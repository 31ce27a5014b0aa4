"""
Self-contained SVG line charts of sweep results

One panel per noise ratio: x is log alpha (evenly spaced categories, the
axis is not uniform), y is mean test log-likelihood over seeds, the plain
VAE baseline is a dashed horizontal line. Output depends only on sweep.csv.
"""

import csv
import math
from collections import OrderedDict
from typing import Dict, List, Tuple

from src.utils.errors import FormatError


SWEEP_HEADER = ['ratio', 'log_alpha', 'seed', 'test_ll']
BASELINE_TAG = 'elbo'
FAILED_TAG = 'failed'

PANEL_WIDTH = 320
PANEL_HEIGHT = 240
MARGIN_LEFT = 64
MARGIN_RIGHT = 16
MARGIN_TOP = 36
MARGIN_BOTTOM = 48
ROBUST_COLOR = '#1f77b4'
BASELINE_COLOR = '#d62728'


def read_sweep_csv(path: str) -> List[Dict[str, str]]:
    """Rows of a sweep.csv"""
    with open(path, 'r', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != SWEEP_HEADER:
            raise FormatError(f"{path}: header {reader.fieldnames} is not {SWEEP_HEADER}")
        return list(reader)


def _panel_data(rows: List[Dict[str, str]]):
    """ratio -> (baseline mean or None, [(log_alpha, mean test_ll)])"""
    panels: 'OrderedDict[str, Tuple[List[float], Dict[float, List[float]]]]' = OrderedDict()
    for row in rows:
        baseline, robust = panels.setdefault(row['ratio'], ([], {}))
        if row['test_ll'] == FAILED_TAG:
            continue
        value = float(row['test_ll'])
        if not math.isfinite(value):
            continue
        if row['log_alpha'] == BASELINE_TAG:
            baseline.append(value)
        else:
            robust.setdefault(float(row['log_alpha']), []).append(value)
    result = OrderedDict()
    for ratio, (baseline, robust) in panels.items():
        base = sum(baseline) / len(baseline) if baseline else None
        points = [(alpha, sum(v) / len(v)) for alpha, v in sorted(robust.items())]
        result[ratio] = (base, points)
    return result


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def render_sweep_svg(rows: List[Dict[str, str]], title: str = 'Test log-likelihood vs log alpha') -> str:
    """
    SVG document for sweep rows

    Args:
        rows: Parsed sweep.csv rows
        title: Chart title

    Returns:
        SVG text
    """
    panels = _panel_data(rows)
    values = [v for base, points in panels.values() for v in ([base] if base is not None else []) + [p[1] for p in points]]
    if values:
        lo, hi = min(values), max(values)
    else:
        lo, hi = -1.0, 0.0
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    width = max(1, len(panels)) * PANEL_WIDTH
    height = PANEL_HEIGHT + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
    ]
    plot_w = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    for p, (ratio, (base, points)) in enumerate(panels.items()):
        x0 = p * PANEL_WIDTH + MARGIN_LEFT
        y0 = 30 + MARGIN_TOP

        def sy(v: float) -> float:
            return y0 + plot_h * (hi - v) / (hi - lo)

        def sx(i: int) -> float:
            if len(points) <= 1:
                return x0 + plot_w / 2
            return x0 + plot_w * i / (len(points) - 1)

        out.append(f'<g class="panel" data-ratio="{ratio}">')
        out.append(f'<rect x="{x0}" y="{y0}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>')
        out.append(f'<text x="{x0 + plot_w / 2:.1f}" y="{y0 - 8}" text-anchor="middle">ratio {ratio}</text>')
        for tick in range(5):
            v = lo + (hi - lo) * tick / 4
            out.append(f'<text x="{x0 - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
        for i, (alpha, _) in enumerate(points):
            out.append(f'<text x="{sx(i):.1f}" y="{y0 + plot_h + 14}" text-anchor="middle">{alpha:g}</text>')
        out.append(f'<text x="{x0 + plot_w / 2:.1f}" y="{y0 + plot_h + 32}" text-anchor="middle">log alpha</text>')
        if base is not None:
            out.append(
                f'<line x1="{x0}" y1="{sy(base):.1f}" x2="{x0 + plot_w}" y2="{sy(base):.1f}" '
                f'stroke="{BASELINE_COLOR}" stroke-dasharray="6 4"><title>VAE {_fmt(base)}</title></line>'
            )
        if points:
            path = ' '.join(f"{sx(i):.1f},{sy(v):.1f}" for i, (_, v) in enumerate(points))
            out.append(f'<polyline points="{path}" fill="none" stroke="{ROBUST_COLOR}" stroke-width="2"/>')
            for i, (alpha, v) in enumerate(points):
                out.append(
                    f'<circle cx="{sx(i):.1f}" cy="{sy(v):.1f}" r="3" fill="{ROBUST_COLOR}">'
                    f'<title>log alpha {alpha:g}: {_fmt(v)}</title></circle>'
                )
        out.append('</g>')

    legend_x = 8
    out.append(f'<line x1="{legend_x}" y1="{height - 8}" x2="{legend_x + 20}" y2="{height - 8}" stroke="{ROBUST_COLOR}" stroke-width="2"/>')
    out.append(f'<text x="{legend_x + 24}" y="{height - 4}">robust VAE</text>')
    out.append(f'<line x1="{legend_x + 110}" y1="{height - 8}" x2="{legend_x + 130}" y2="{height - 8}" stroke="{BASELINE_COLOR}" stroke-dasharray="6 4"/>')
    out.append(f'<text x="{legend_x + 134}" y="{height - 4}">VAE</text>')
    out.append('</svg>')
    return '\n'.join(out) + '\n'


def write_sweep_chart(csv_path: str, svg_path: str) -> str:
    """Regenerate the chart for a sweep.csv"""
    svg = render_sweep_svg(read_sweep_csv(csv_path))
    with open(svg_path, 'w') as f:
        f.write(svg)
    return svg_path
