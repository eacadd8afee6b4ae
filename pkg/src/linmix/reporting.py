"""CSV and SVG output helpers.

Every CSV carries #-prefixed comment lines recording the config hash and
seed before the header row, so any output file can be traced back to the
run that produced it. Charts are small self-contained SVG files rendered
here directly; there is no plotting dependency.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math

from .exceptions import ConfigError


def config_hash(cfg: dict) -> str:
    """Short stable digest of a flat config mapping."""
    blob = "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def write_resolved_config(path, cfg: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def csv_text(fieldnames, rows, comments: dict | None = None) -> str:
    """Render rows (dicts or sequences) as CSV with leading comment lines."""
    out = io.StringIO()
    for key, value in (comments or {}).items():
        out.write(f"# {key} = {value}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(name) for name in fieldnames]
        writer.writerow(["" if v is None else v for v in row])
    return out.getvalue()


def write_csv(path, fieldnames, rows, comments: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(csv_text(fieldnames, rows, comments))


METRICS_FIELDS = ("step", "loss_total", "loss_simple", "loss_kd", "loss_feat")


def metrics_csv_text(log, comments: dict | None = None) -> str:
    """Training log rows (step, total, simple, kd, feat) as CSV."""
    return csv_text(METRICS_FIELDS, log, comments)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _ticks(lo: float, hi: float) -> list[float]:
    # decade ticks covering [lo, hi] in log10 space
    first = math.floor(lo)
    last = math.ceil(hi)
    return [float(t) for t in range(first, last + 1)]


def line_chart_svg(series: dict, title: str, xlabel: str, ylabel: str,
                   loglog: bool = True, width: int = 560,
                   height: int = 400) -> str:
    """A minimal line chart. series maps label -> (xs, ys); axes are log10
    when loglog is set. Returns the SVG text."""
    if not series:
        raise ConfigError("no series to plot")
    pts = {}
    for label, (xs, ys) in series.items():
        if len(xs) != len(ys) or not xs:
            raise ConfigError(f"series {label!r} is empty or ragged")
        if loglog:
            if any(v <= 0 for v in xs) or any(v <= 0 for v in ys):
                raise ConfigError(f"series {label!r} has non-positive values "
                                  "on a log axis")
            pts[label] = ([math.log10(v) for v in xs],
                          [math.log10(v) for v in ys])
        else:
            pts[label] = (list(map(float, xs)), list(map(float, ys)))
    all_x = [v for xs, _ in pts.values() for v in xs]
    all_y = [v for _, ys in pts.values() for v in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    margin_l, margin_r, margin_t, margin_b = 64, 16, 36, 48
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b

    def to_px(x, y):
        px = margin_l + (x - x_lo) / (x_hi - x_lo) * plot_w
        py = margin_t + (y_hi - y) / (y_hi - y_lo) * plot_h
        return px, py

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    axis = (f'M {margin_l} {margin_t} L {margin_l} {margin_t + plot_h} '
            f'L {margin_l + plot_w} {margin_t + plot_h}')
    parts.append(f'<path d="{axis}" stroke="black" fill="none"/>')
    if loglog:
        for t in _ticks(x_lo, x_hi):
            if not x_lo <= t <= x_hi:
                continue
            px, _ = to_px(t, y_lo)
            parts.append(f'<line x1="{px:.1f}" y1="{margin_t + plot_h}" '
                         f'x2="{px:.1f}" y2="{margin_t + plot_h + 5}" '
                         f'stroke="black"/>')
            parts.append(f'<text x="{px:.1f}" y="{margin_t + plot_h + 18}" '
                         f'text-anchor="middle" font-family="sans-serif" '
                         f'font-size="11">1e{int(t)}</text>')
        for t in _ticks(y_lo, y_hi):
            if not y_lo <= t <= y_hi:
                continue
            _, py = to_px(x_lo, t)
            parts.append(f'<line x1="{margin_l - 5}" y1="{py:.1f}" '
                         f'x2="{margin_l}" y2="{py:.1f}" stroke="black"/>')
            parts.append(f'<text x="{margin_l - 8}" y="{py + 4:.1f}" '
                         f'text-anchor="end" font-family="sans-serif" '
                         f'font-size="11">1e{int(t)}</text>')
    parts.append(f'<text x="{margin_l + plot_w / 2:.0f}" y="{height - 10}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{xlabel}</text>')
    parts.append(f'<text x="16" y="{margin_t + plot_h / 2:.0f}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12" transform="rotate(-90 16 '
                 f'{margin_t + plot_h / 2:.0f})">{ylabel}</text>')
    for i, (label, (xs, ys)) in enumerate(sorted(pts.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{to_px(x, y)[0]:.1f},{to_px(x, y)[1]:.1f}"
                          for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            px, py = to_px(x, y)
            parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="2.5" '
                         f'fill="{color}"/>')
        ly = margin_t + 14 + 16 * i
        lx = margin_l + plot_w - 130
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{lx + 28}" y="{ly}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_line_chart(path, series: dict, title: str, xlabel: str,
                     ylabel: str, loglog: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(line_chart_svg(series, title, xlabel, ylabel, loglog=loglog))
