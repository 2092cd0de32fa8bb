"""Dependency-free SVG line charts of the per-epoch metrics CSV."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, PANEL_H = 640, 260
MARGIN = dict(left=70, right=130, top=30, bottom=40)
COLORS = {"train": "#1f77b4", "val": "#d62728"}


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "epoch" not in reader.fieldnames:
            raise ValueError(f"{path}: metrics CSV needs an 'epoch' column")
        rows = list(reader)
    columns = {name: [] for name in reader.fieldnames}
    for row in rows:
        for name in reader.fieldnames:
            cell = (row.get(name) or "").strip()
            columns[name].append(float(cell) if cell not in ("", "nan") else None)
    return columns


def _fmt(v):
    return f"{v:.6g}"


def _panel(out, y0, title, epochs, series, ylabel):
    """Append one panel; ``series`` maps id -> (label, colour, values)."""
    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = PANEL_H - MARGIN["top"] - MARGIN["bottom"]
    x0, top = MARGIN["left"], y0 + MARGIN["top"]
    values = [v for _, _, vals in series.values() for v in vals if v is not None]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    pad = (hi - lo) * 0.1 or max(abs(hi) * 0.001, 1e-6)
    lo, hi = lo - pad, hi + pad
    e_lo, e_hi = min(epochs), max(epochs)
    e_span = (e_hi - e_lo) or 1

    def px(e):
        return x0 + (e - e_lo) / e_span * plot_w

    def py(v):
        return top + (hi - v) / (hi - lo) * plot_h

    out.append(f'<g class="panel" data-title="{escape(title)}">')
    out.append(f'<text x="{x0}" y="{y0 + 18}" font-size="14" font-weight="bold">{escape(title)}</text>')
    out.append(f'<rect x="{x0}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>')
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = py(v)
        out.append(f'<line x1="{x0 - 4}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="#444"/>')
        out.append(f'<text x="{x0 - 6}" y="{y + 4:.2f}" font-size="10" text-anchor="end">{_fmt(v)}</text>')
    for e in epochs:
        x = px(e)
        out.append(f'<text x="{x:.2f}" y="{top + plot_h + 14}" font-size="10" text-anchor="middle">{e:g}</text>')
    out.append(f'<text x="{x0 + plot_w / 2}" y="{top + plot_h + 32}" font-size="11" text-anchor="middle">epoch</text>')
    out.append(f'<text x="14" y="{top + plot_h / 2}" font-size="11" '
               f'transform="rotate(-90 14 {top + plot_h / 2})" text-anchor="middle">{escape(ylabel)}</text>')
    for i, (sid, (label, color, vals)) in enumerate(series.items()):
        pts = [(px(e), py(v)) for e, v in zip(epochs, vals) if v is not None]
        if not pts:
            continue
        raw = " ".join(_fmt(v) for v in vals if v is not None)
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        out.append(f'<polyline id="{sid}" data-values="{raw}" points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 18 * i
        lx = x0 + plot_w + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</g>")


def render_svg(columns) -> str:
    epochs = [e for e in columns["epoch"] if e is not None]
    panels = []
    acc = {f"{k}_acc": (f"{k} accuracy", COLORS[k], columns[f"{k}_acc"])
           for k in ("train", "val") if f"{k}_acc" in columns}
    loss = {f"{k}_loss": (f"{k} loss", COLORS[k], columns[f"{k}_loss"])
            for k in ("train", "val") if f"{k}_loss" in columns}
    if acc:
        panels.append(("Pixel accuracy", acc, "accuracy"))
    if loss:
        panels.append(("BCE loss", loss, "loss"))
    height = PANEL_H * max(len(panels), 1)
    out = [f'<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
           f'viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">',
           f'<rect width="{WIDTH}" height="{height}" fill="white"/>']
    for i, (title, series, ylabel) in enumerate(panels):
        _panel(out, i * PANEL_H, title, epochs, series, ylabel)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(metrics_csv, out_path) -> Path:
    svg = render_svg(read_metrics(metrics_csv))
    out_path = Path(out_path)
    out_path.write_text(svg, encoding="utf-8")
    return out_path
