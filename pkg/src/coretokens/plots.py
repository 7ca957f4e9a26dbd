"""Standalone SVG charts: accuracy against memory, accuracy against task, relevance heatmaps."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ContractError

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 190, "top": 40, "bottom": 60}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


class Axes:
    """Linear map from data coordinates to the SVG plot area."""

    def __init__(self, xlim, ylim):
        self.x0, self.x1 = _pad(*xlim)
        self.y0, self.y1 = _pad(*ylim)
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]

    def px(self, x: float) -> float:
        return self.left + (x - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def py(self, y: float) -> float:
        return self.bottom - (y - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)


def _pad(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-12:
        return lo - 0.5, hi + 0.5
    return lo, hi


def _svg(width: int, height: int) -> ET.Element:
    svg = ET.Element("svg", {"xmlns": "http://www.w3.org/2000/svg", "width": str(width),
                             "height": str(height), "viewBox": f"0 0 {width} {height}"})
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(width), "height": str(height), "fill": "white"})
    return svg


def _text(parent, x, y, s, size=12, anchor="start", rotate=None):
    attrs = {"x": f"{x:.2f}", "y": f"{y:.2f}", "font-family": "sans-serif", "font-size": str(size),
             "text-anchor": anchor}
    if rotate is not None:
        attrs["transform"] = f"rotate({rotate} {x:.2f} {y:.2f})"
    ET.SubElement(parent, "text", attrs).text = s


def _line(parent, x1, y1, x2, y2, stroke="black", width=1):
    ET.SubElement(parent, "line", {"x1": f"{x1:.2f}", "y1": f"{y1:.2f}", "x2": f"{x2:.2f}", "y2": f"{y2:.2f}",
                                   "stroke": stroke, "stroke-width": str(width)})


def _axes(svg, ax: Axes, xlabel: str, ylabel: str) -> None:
    g = ET.SubElement(svg, "g", {"class": "axes"})
    _line(g, ax.left, ax.bottom, ax.right, ax.bottom)
    _line(g, ax.left, ax.bottom, ax.left, ax.top)
    for v in np.linspace(ax.x0, ax.x1, 5):
        x = ax.px(v)
        _line(g, x, ax.bottom, x, ax.bottom + 5)
        _text(g, x, ax.bottom + 18, f"{v:.3g}", size=10, anchor="middle")
    for v in np.linspace(ax.y0, ax.y1, 5):
        y = ax.py(v)
        _line(g, ax.left - 5, y, ax.left, y)
        _line(g, ax.left, y, ax.right, y, stroke="#dddddd")
        _text(g, ax.left - 8, y + 4, f"{v:.3g}", size=10, anchor="end")
    _text(g, (ax.left + ax.right) / 2, HEIGHT - 18, xlabel, anchor="middle")
    _text(g, 20, (ax.top + ax.bottom) / 2, ylabel, anchor="middle", rotate=-90)


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
               ylim: tuple[float, float] | None = None, desc: str = "") -> str:
    """SVG text with one polyline and point markers per named series."""
    if not series or not any(series.values()):
        raise ContractError("a chart needs at least one data point")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    ax = Axes((min(xs), max(xs)), ylim or (min(ys), max(ys)))
    svg = _svg(WIDTH, HEIGHT)
    if desc:
        ET.SubElement(svg, "desc").text = desc
    _text(svg, (ax.left + ax.right) / 2, 24, title, size=15, anchor="middle")
    _axes(svg, ax, xlabel, ylabel)
    legend_y = MARGIN["top"] + 10
    for i, name in enumerate(sorted(series)):
        colour = PALETTE[i % len(PALETTE)]
        pts = sorted(series[name])
        g = ET.SubElement(svg, "g", {"class": "series", "data-name": name})
        if len(pts) > 1:
            coords = " ".join(f"{ax.px(x):.2f},{ax.py(y):.2f}" for x, y in pts)
            ET.SubElement(g, "polyline", {"points": coords, "fill": "none", "stroke": colour, "stroke-width": "2"})
        for x, y in pts:
            ET.SubElement(g, "circle", {"cx": f"{ax.px(x):.2f}", "cy": f"{ax.py(y):.2f}", "r": "3.5",
                                        "fill": colour})
        lx = ax.right + 15
        _line(svg, lx, legend_y, lx + 20, legend_y, stroke=colour, width=2)
        _text(svg, lx + 26, legend_y + 4, name, size=11)
        legend_y += 18
    return ET.tostring(svg, encoding="unicode")


def memory_series(records) -> dict[str, list[tuple[float, float]]]:
    """Mean final average accuracy per method and retention rate, averaged over seeds."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.row.method, r.row.R)].append(r.row.avg_acc)
    series = defaultdict(list)
    for (method, R), accs in groups.items():
        series[method].append((R * 100.0, float(np.mean(accs))))
    return dict(series)


def task_series(records) -> dict[str, list[tuple[float, float]]]:
    """Mean average accuracy over seen tasks after each task, per method and rate."""
    groups = defaultdict(list)
    for r in records:
        acc = r.acc
        curve = [float(np.mean(acc[i, :i + 1])) for i in range(acc.shape[0])]
        name = r.row.method if r.row.method in ("naive", "cumulative") else f"{r.row.method} R={r.row.R:g}"
        groups[name].append(curve)
    out = {}
    for name, curves in groups.items():
        mean = np.mean(np.array(curves), axis=0)
        out[name] = [(i + 1.0, float(v)) for i, v in enumerate(mean)]
    return out


def emit_plots(records, out_dir, desc: str = "") -> list[Path]:
    """Write ``accuracy_vs_memory.svg`` and ``accuracy_vs_task.svg``; returns their paths."""
    if not records:
        raise ContractError("no result rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mem = out_dir / "accuracy_vs_memory.svg"
    mem.write_text(line_chart(memory_series(records), "Final average accuracy by memory",
                              "stored tokens (% of task data)", "average accuracy", (0.0, 1.0), desc))
    task = out_dir / "accuracy_vs_task.svg"
    task.write_text(line_chart(task_series(records), "Average accuracy over seen tasks",
                               "tasks trained", "average accuracy", (0.0, 1.0), desc))
    return [mem, task]


def heatmap(values: np.ndarray, title: str = "", cell: int = 24, marks=None) -> str:
    """SVG grid of ``(rows, cols)`` values in [min, max], white to dark red.

    ``marks`` is an optional boolean array of the same shape; marked cells
    get a black outline.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ContractError(f"heatmap needs a non-empty 2-D array, got shape {values.shape}")
    rows, cols = values.shape
    lo, hi = float(values.min()), float(values.max())
    scale = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    top = 30 if title else 5
    svg = _svg(cols * cell + 10, rows * cell + top + 5)
    if title:
        _text(svg, 5, 18, title, size=12)
    for r in range(rows):
        for c in range(cols):
            v = scale[r, c]
            red, shade = int(255 - 100 * v), int(255 * (1 - v))
            attrs = {"x": str(5 + c * cell), "y": str(top + r * cell), "width": str(cell),
                     "height": str(cell), "fill": f"rgb({red},{shade},{shade})"}
            if marks is not None and marks[r, c]:
                attrs.update({"stroke": "black", "stroke-width": "2"})
            ET.SubElement(svg, "rect", attrs)
    return ET.tostring(svg, encoding="unicode")
