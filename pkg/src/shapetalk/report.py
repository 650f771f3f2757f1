"""Chart and summary generation from a run directory's CSV artifacts.

Charts are self-contained SVG files; every plotted point carries ``data-x``
and ``data-y`` attributes with the exact source values so the charts are
machine-auditable against their CSVs.
"""

import csv
import json
import os
from collections import defaultdict

WIDTH, HEIGHT = 640, 400
MARGIN = 60


class ReportError(Exception):
    pass


def _scale(values, lo_px, hi_px):
    vmin, vmax = min(values), max(values)
    if vmax == vmin:
        vmin, vmax = vmin - 0.5, vmax + 0.5
    span = vmax - vmin

    def to_px(v):
        return lo_px + (v - vmin) / span * (hi_px - lo_px)

    return to_px, vmin, vmax


def _axes(title, xlabel, ylabel, xmin, xmax, ymin, ymax):
    x0, x1 = MARGIN, WIDTH - MARGIN
    y0, y1 = HEIGHT - MARGIN, MARGIN
    return [
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 16}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="18" y="{HEIGHT // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {HEIGHT // 2})">{ylabel}</text>',
        f'<text x="{x0}" y="{y0 + 16}" font-size="10">{xmin:.4g}</text>',
        f'<text x="{x1}" y="{y0 + 16}" text-anchor="end" font-size="10">{xmax:.4g}</text>',
        f'<text x="{x0 - 6}" y="{y0}" text-anchor="end" font-size="10">{ymin:.4g}</text>',
        f'<text x="{x0 - 6}" y="{y1}" text-anchor="end" font-size="10">{ymax:.4g}</text>',
    ]


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart(series: dict, title, xlabel, ylabel, path):
    """``series`` maps label -> list of (x, y). Points carry data-x/data-y."""
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise ReportError(f"no data for chart {title!r}")
    to_x, xmin, xmax = _scale(xs, MARGIN, WIDTH - MARGIN)
    to_y, ymin, ymax = _scale(ys, HEIGHT - MARGIN, MARGIN)
    parts = _axes(title, xlabel, ylabel, xmin, xmax, ymin, ymax)
    for i, (label, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{to_x(x):.2f},{to_y(y):.2f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(
                f'<circle cx="{to_x(x):.2f}" cy="{to_y(y):.2f}" r="3" fill="{color}" '
                f'data-series="{label}" data-x="{x!r}" data-y="{y!r}"/>'
            )
        parts.append(
            f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * i + 10}" '
            f'font-size="11" fill="{color}">{label}</text>'
        )
    _write_svg(path, parts)


def bar_chart(bars: list, title, xlabel, ylabel, path):
    """``bars`` is a list of (label, value); bars carry data-y."""
    if not bars:
        raise ReportError(f"no data for chart {title!r}")
    values = [v for _, v in bars] + [0.0]
    to_y, ymin, ymax = _scale(values, HEIGHT - MARGIN, MARGIN)
    parts = _axes(title, xlabel, ylabel, 0, len(bars), ymin, ymax)
    slot = (WIDTH - 2 * MARGIN) / len(bars)
    zero = to_y(0.0)
    for i, (label, value) in enumerate(bars):
        x = MARGIN + i * slot + slot * 0.15
        top = min(to_y(value), zero)
        height = abs(to_y(value) - zero)
        parts.append(
            f'<rect x="{x:.2f}" y="{top:.2f}" width="{slot * 0.7:.2f}" '
            f'height="{height:.2f}" fill="{_COLORS[i % len(_COLORS)]}" '
            f'data-label="{label}" data-y="{value!r}"/>'
        )
        parts.append(
            f'<text x="{x + slot * 0.35:.2f}" y="{HEIGHT - MARGIN + 28}" '
            f'text-anchor="middle" font-size="9">{label}</text>'
        )
    _write_svg(path, parts)


def _write_svg(path, parts):
    body = "\n".join(parts)
    with open(path, "w") as f:
        f.write(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def report(run_dir, out_dir=None) -> dict:
    """Generate charts and a summary for whatever CSVs the run produced."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    produced, summary = [], {}

    correlation = os.path.join(run_dir, "correlation.csv")
    if os.path.exists(correlation):
        rows = _read_csv(correlation)
        acc = defaultdict(lambda: defaultdict(list))
        for r in rows:
            acc[r["metric_name"]][int(r["rank"])].append(float(r["metric_value"]))
        series = {
            m: [(rank, sum(v) / len(v)) for rank, v in sorted(buckets.items())]
            for m, buckets in acc.items()
        }
        path = os.path.join(out_dir, "figure_insight1.svg")
        line_chart(series, "Reconstruction rank vs caption quality",
                   "similarity rank (1 = best)", "mean metric value", path)
        produced.append(path)
        summary["bucket_means"] = {m: dict(pts) for m, pts in series.items()}

    selection = os.path.join(run_dir, "selection.csv")
    if os.path.exists(selection):
        rows = _read_csv(selection)
        bars = [
            (f"{r['domain']}/{r['metric']}", float(r["gain_pct"]))
            for r in rows
        ]
        path = os.path.join(out_dir, "figure_selection.svg")
        bar_chart(bars, "Selection gain over baseline sampling",
                  "domain/metric", "gain (%)", path)
        produced.append(path)
        summary["selection"] = {
            f"{r['domain']}/{r['metric']}": {
                "baseline": float(r["baseline"]),
                "ours": float(r["ours"]),
                "gain_pct": float(r["gain_pct"]),
            }
            for r in rows
        }

    sweep = os.path.join(run_dir, "sweep.csv")
    if os.path.exists(sweep):
        rows = [r for r in _read_csv(sweep)
                if r["domain"] == "overall" and r["metric"] == "cider"]
        if rows:
            series = {
                "ours": [(float(r["value"]), float(r["ours"])) for r in rows],
                "baseline": [(float(r["value"]), float(r["baseline"])) for r in rows],
            }
            param = rows[0]["parameter"]
            path = os.path.join(out_dir, "figure_sweep.svg")
            line_chart(series, f"CIDEr vs {param}", param, "CIDEr", path)
            produced.append(path)
            summary["sweep_parameter"] = param

    ablation = os.path.join(run_dir, "ablation.csv")
    if os.path.exists(ablation):
        rows = [r for r in _read_csv(ablation) if r["metric"] == "cider"]
        if rows:
            bars = [(r["variant"], float(r["mean"])) for r in rows]
            path = os.path.join(out_dir, "figure_ablation.svg")
            bar_chart(bars, "Finetuning variants (val CIDEr)", "variant",
                      "CIDEr", path)
            produced.append(path)
            summary["ablation_cider"] = {r["variant"]: float(r["mean"]) for r in rows}

    if not produced:
        raise ReportError(
            f"no report inputs in {run_dir}; expected one of correlation.csv, "
            "selection.csv, sweep.csv, ablation.csv"
        )
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    produced.append(summary_path)
    return {"outputs": produced, "summary": summary}
