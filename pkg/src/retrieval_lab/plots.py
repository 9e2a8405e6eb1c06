"""Dependency-free SVG figures; every plot also writes its data as CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 400
MARGIN = dict(left=70, right=160, top=40, bottom=50)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


@dataclass
class PlotSeries:
    name: str
    x: list[float]
    y: list[float]
    dashed: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = [float(v) for v in self.x]
        self.y = [float(v) for v in self.y]
        if len(self.x) != len(self.y):
            raise ValueError(f"series {self.name!r}: {len(self.x)} x values but {len(self.y)} y values")


def write_series_csv(series: list[PlotSeries], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "x", "y"])
        for s in series:
            for x, y in zip(s.x, s.y):
                w.writerow([s.name, repr(x), repr(y)])


def read_series_csv(path: str | Path) -> list[PlotSeries]:
    out: dict[str, PlotSeries] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r, None) != ["series", "x", "y"]:
            raise ValueError(f"{path}:1: expected header series,x,y")
        for lineno, row in enumerate(r, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            s = out.setdefault(row[0], PlotSeries(row[0], [], []))
            s.x.append(x)
            s.y.append(y)
    return list(out.values())


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}"
    return f"{v:g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


class _Frame:
    def __init__(self, xlo, xhi, ylo, yhi, log_y=False):
        self.log_y = log_y
        if log_y:
            ylo, yhi = math.log10(ylo), math.log10(yhi)
        if xhi == xlo:
            xlo, xhi = xlo - 0.5, xhi + 0.5
        if yhi == ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi
        self.pw = W - MARGIN["left"] - MARGIN["right"]
        self.ph = H - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x: float) -> float:
        return MARGIN["left"] + (x - self.xlo) / (self.xhi - self.xlo) * self.pw

    def py(self, y: float) -> float:
        if self.log_y:
            y = math.log10(max(y, 1e-300))
        return MARGIN["top"] + (1 - (y - self.ylo) / (self.yhi - self.ylo)) * self.ph

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        L, T = MARGIN["left"], MARGIN["top"]
        out = [
            f'<rect x="{L}" y="{T}" width="{self.pw}" height="{self.ph}" fill="none" stroke="black"/>',
            f'<text x="{L + self.pw / 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<text x="{L + self.pw / 2}" y="{H - 10}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
            f'<text x="16" y="{T + self.ph / 2}" text-anchor="middle" font-size="13" '
            f'transform="rotate(-90 16 {T + self.ph / 2})">{escape(ylabel)}</text>',
        ]
        for xt in _ticks(self.xlo, self.xhi):
            out.append(f'<text x="{self.px(xt):.1f}" y="{T + self.ph + 16}" text-anchor="middle" '
                       f'font-size="11">{_fmt(xt)}</text>')
        if self.log_y:
            yts = [10.0**e for e in range(math.floor(self.ylo), math.ceil(self.yhi) + 1)
                   if self.ylo <= e <= self.yhi]
        else:
            yts = _ticks(self.ylo, self.yhi)
        for yt in yts:
            out.append(f'<text x="{L - 6}" y="{self.py(yt) + 4:.1f}" text-anchor="end" font-size="11">{_fmt(yt)}</text>')
        return out


def _svg(body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n'
            '<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def _legend(names: list[tuple[str, str, bool]]) -> list[str]:
    out = []
    x0 = W - MARGIN["right"] + 12
    for i, (name, color, dashed) in enumerate(names):
        y = MARGIN["top"] + 12 + 18 * i
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        out.append(f'<line x1="{x0}" y1="{y}" x2="{x0 + 22}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{x0 + 28}" y="{y + 4}" font-size="11">{escape(name)}</text>')
    return out


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    return p.with_suffix(".svg"), p.with_suffix(".csv")


def line_plot(
    series: list[PlotSeries],
    path: str | Path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_y: bool = False,
    hline: float | None = None,
) -> Path:
    """One polyline per series; ``hline`` draws a dashed reference level."""
    if not series or all(len(s.x) == 0 for s in series):
        raise ValueError("nothing to plot: empty series")
    xs = np.concatenate([s.x for s in series])
    ys = np.concatenate([s.y for s in series] + ([[hline]] if hline is not None else []))
    if log_y and (ys <= 0).any():
        raise ValueError("log axis needs positive values")
    frame = _Frame(xs.min(), xs.max(), ys.min(), ys.max(), log_y)
    body = frame.axes(title, xlabel, ylabel)
    legend = []
    for i, s in enumerate(series):
        if not s.x:
            continue
        c = COLORS[i % len(COLORS)]
        pts = " ".join(f"{frame.px(x):.2f},{frame.py(y):.2f}" for x, y in zip(s.x, s.y))
        dash = ' stroke-dasharray="6 4"' if s.dashed else ""
        body.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="2"{dash}/>')
        legend.append((s.name, c, s.dashed))
    if hline is not None:
        y = frame.py(hline)
        body.append(f'<line class="threshold" x1="{MARGIN["left"]}" y1="{y:.2f}" x2="{MARGIN["left"] + frame.pw}" '
                    f'y2="{y:.2f}" stroke="gray" stroke-dasharray="4 4"/>')
    svg, data = _paths(path)
    svg.parent.mkdir(parents=True, exist_ok=True)
    svg.write_text(_svg(body + _legend(legend)))
    write_series_csv(series, data)
    return svg


def bar_plot(
    labels: list[str], values: list[float], baselines: list[float], path: str | Path, title: str = "", ylabel: str = ""
) -> Path:
    """Bars with a dashed baseline segment over each bar."""
    if not labels:
        raise ValueError("nothing to plot: no bars")
    if not len(labels) == len(values) == len(baselines):
        raise ValueError("labels, values and baselines must have equal length")
    top = max(1.0, max(values), max(baselines))
    frame = _Frame(0, len(labels), 0, top)
    body = frame.axes(title, "", ylabel)
    slot = frame.pw / len(labels)
    for i, (lab, v, b) in enumerate(zip(labels, values, baselines)):
        x = MARGIN["left"] + i * slot + slot * 0.15
        w = slot * 0.7
        y = frame.py(v)
        body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{frame.py(0) - y:.2f}" '
                    f'fill="{COLORS[0]}"/>')
        yb = frame.py(b)
        body.append(f'<line class="baseline" x1="{x:.2f}" y1="{yb:.2f}" x2="{x + w:.2f}" y2="{yb:.2f}" '
                    f'stroke="black" stroke-dasharray="5 3" stroke-width="2"/>')
        body.append(f'<text x="{x + w / 2:.2f}" y="{H - MARGIN["bottom"] + 16}" text-anchor="middle" '
                    f'font-size="11">{escape(lab)}</text>')
    svg, data = _paths(path)
    svg.parent.mkdir(parents=True, exist_ok=True)
    svg.write_text(_svg(body))
    write_series_csv(
        [PlotSeries("accuracy", list(range(len(labels))), values), PlotSeries("baseline", list(range(len(labels))), baselines)],
        data,
    )
    return svg


def heatmap_svg(matrix: np.ndarray, path: str | Path, title: str = "", labels: list[str] | None = None) -> Path:
    """Grayscale heatmap, black = 1, white = 0."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("heatmap needs a non-empty 2-D matrix")
    rows, cols = m.shape
    cell = max(4, min(24, 480 // max(rows, cols)))
    off = 110 if labels else 10
    w, h = off + cols * cell + 10, off + rows * cell + 10
    body = [f'<text x="{off}" y="16" font-size="12">{escape(title)}</text>']
    for i in range(rows):
        for j in range(cols):
            g = int(round(255 * (1 - min(max(m[i, j], 0.0), 1.0))))
            body.append(f'<rect x="{off + j * cell}" y="{off + i * cell}" width="{cell}" height="{cell}" '
                        f'fill="rgb({g},{g},{g})"/>')
    if labels:
        for i, lab in enumerate(labels[:rows]):
            body.append(f'<text x="{off - 4}" y="{off + i * cell + cell * 0.75:.1f}" text-anchor="end" '
                        f'font-size="{max(6, cell * 0.6):.0f}">{escape(lab)}</text>')
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">\n'
                 '<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")
    return p


# -- figure kinds ---------------------------------------------------------------


def _read_rows(path: str | Path, required: list[str]) -> list[dict]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        missing = [k for k in required if k not in (r.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}:1: missing columns {missing}")
        rows = []
        for lineno, row in enumerate(r, start=2):
            if None in row or any(v is None for v in row.values()):
                raise ValueError(f"{path}:{lineno}: wrong number of fields")
            row["_line"] = lineno
            rows.append(row)
    return rows


def _num(row: dict, key: str, path) -> float:
    try:
        return float(row[key])
    except ValueError as exc:
        raise ValueError(f"{path}:{row['_line']}: column {key}: {exc}") from exc


def layers_series(summary_csv: str | Path) -> list[PlotSeries]:
    """Mean final loss against depth, one series per formulation."""
    rows = _read_rows(summary_csv, ["formulation", "layers", "mean_final_loss"])
    out: dict[str, PlotSeries] = {}
    for r in rows:
        if not r["mean_final_loss"]:
            continue
        s = out.setdefault(r["formulation"], PlotSeries(r["formulation"].upper().replace("_", "-"), [], []))
        s.x.append(_num(r, "layers", summary_csv))
        s.y.append(_num(r, "mean_final_loss", summary_csv))
    return list(out.values())


def partial_series(metrics_csv: str | Path) -> list[PlotSeries]:
    """Validation loss and per-position partial losses against step."""
    rows = _read_rows(metrics_csv, ["step", "val_loss"])
    parts = [k for k in rows[0] if k.startswith("partial_")] if rows else []
    series = [PlotSeries("validation", [], [])] + [PlotSeries(f"x{k.split('_')[1]}", [], []) for k in parts]
    for r in rows:
        if not r["val_loss"]:
            continue
        step = _num(r, "step", metrics_csv)
        series[0].x.append(step)
        series[0].y.append(_num(r, "val_loss", metrics_csv))
        for s, k in zip(series[1:], parts):
            if r[k]:
                s.x.append(step)
                s.y.append(_num(r, k, metrics_csv))
    return series


def emergence_series(trace_csv: str | Path) -> list[PlotSeries]:
    rows = _read_rows(trace_csv, ["epoch", "path_id", "attention"])
    out: dict[str, PlotSeries] = {}
    for r in rows:
        s = out.setdefault(r["path_id"], PlotSeries(r["path_id"], [], []))
        s.x.append(_num(r, "epoch", trace_csv))
        s.y.append(_num(r, "attention", trace_csv))
    return list(out.values())


def emit_plot(kind: str, source: str | Path, out: str | Path) -> Path:
    """Render one figure of ``kind`` from a results file; returns the SVG path."""
    if kind == "layers":
        return line_plot(layers_series(source), out, "Final validation loss by depth", "layers", "MSE")
    if kind == "partial":
        return line_plot(partial_series(source), out, "Validation loss during training", "step", "MSE",
                         log_y=True, hline=0.5)
    if kind == "emergence":
        return line_plot(emergence_series(source), out, "Average path attention", "epoch", "attention", hline=0.5)
    if kind == "accuracy":
        rows = _read_rows(source, ["formulation", "accuracy", "baseline"])
        return bar_plot(
            [r["formulation"] for r in rows],
            [_num(r, "accuracy", source) for r in rows],
            [_num(r, "baseline", source) for r in rows],
            out,
            "Benchmark accuracy",
            "accuracy",
        )
    raise ValueError(f"unknown plot kind {kind!r}")
