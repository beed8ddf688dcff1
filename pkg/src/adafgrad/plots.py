"""Dependency-free SVG report plots.

Plots are plain-text SVG so runs can be diffed and parsed. Scatter points
carry their data coordinates as data-* attributes in full precision, in
addition to the pixel placement.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 60, 20, 36, 46


def _color(i: int) -> str:
    return _PALETTE[i % len(_PALETTE)]


class _Canvas:
    def __init__(self, title: str, x_label: str, y_label: str,
                 x_range, y_range):
        self.parts = []
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.parts.append(
            f'<text x="{_W / 2}" y="20" text-anchor="middle" '
            f'font-size="14" font-family="sans-serif">{escape(title)}</text>')
        self.parts.append(
            f'<text x="{_W / 2}" y="{_H - 8}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">{escape(x_label)}</text>')
        self.parts.append(
            f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif" transform="rotate(-90 14 {_H / 2})">'
            f'{escape(y_label)}</text>')
        self.parts.append(
            f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
            f'height="{_H - _MT - _MB}" fill="none" stroke="#444"/>')
        for frac in (0.0, 0.5, 1.0):
            xv = self.x0 + frac * (self.x1 - self.x0)
            yv = self.y0 + frac * (self.y1 - self.y0)
            self.parts.append(
                f'<text x="{self.px(xv):.1f}" y="{_H - _MB + 16}" '
                f'text-anchor="middle" font-size="10" '
                f'font-family="sans-serif">{xv:.3g}</text>')
            self.parts.append(
                f'<text x="{_ML - 6}" y="{self.py(yv):.1f}" text-anchor="end" '
                f'font-size="10" font-family="sans-serif">{yv:.3g}</text>')

    def px(self, x: float) -> float:
        return _ML + (x - self.x0) / (self.x1 - self.x0) * (_W - _ML - _MR)

    def py(self, y: float) -> float:
        return _H - _MB - (y - self.y0) / (self.y1 - self.y0) * (_H - _MT - _MB)

    def polyline(self, xs, ys, color, label=None):
        pts = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}"
                       for x, y in zip(xs, ys))
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>')
        if label is not None:
            self.parts.append(
                f'<text x="{self.px(xs[-1]) + 4:.1f}" y="{self.py(ys[-1]):.1f}" '
                f'font-size="10" font-family="sans-serif" fill="{color}">'
                f'{escape(label)}</text>')

    def point(self, x, y, color, label=None, data=None):
        attrs = ""
        if data:
            attrs = "".join(
                f' data-{k}="{escape(repr(v) if isinstance(v, float) else str(v))}"'
                for k, v in data.items())
        self.parts.append(
            f'<circle cx="{self.px(x):.2f}" cy="{self.py(y):.2f}" r="4" '
            f'fill="{color}"{attrs}/>')
        if label is not None:
            self.parts.append(
                f'<text x="{self.px(x) + 6:.1f}" y="{self.py(y) - 6:.1f}" '
                f'font-size="10" font-family="sans-serif">{escape(label)}</text>')

    def box(self, x_center, width, stats, color):
        """Five-number box: whiskers min..max, box q1..q3, median bar."""
        lo, q1, med, q3, hi = (stats[k] for k in ("min", "q1", "median", "q3", "max"))
        xl, xr = self.px(x_center - width / 2), self.px(x_center + width / 2)
        xc = self.px(x_center)
        self.parts.append(
            f'<line x1="{xc:.1f}" y1="{self.py(lo):.1f}" x2="{xc:.1f}" '
            f'y2="{self.py(hi):.1f}" stroke="{color}"/>')
        self.parts.append(
            f'<rect x="{xl:.1f}" y="{self.py(q3):.1f}" width="{xr - xl:.1f}" '
            f'height="{abs(self.py(q1) - self.py(q3)):.1f}" fill="{color}" '
            f'fill-opacity="0.35" stroke="{color}"/>')
        self.parts.append(
            f'<line x1="{xl:.1f}" y1="{self.py(med):.1f}" x2="{xr:.1f}" '
            f'y2="{self.py(med):.1f}" stroke="{color}" stroke-width="2"/>')

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
                f'height="{_H}" viewBox="0 0 {_W} {_H}">\n{body}\n</svg>\n')


def accuracy_curves_svg(report) -> str:
    """One line per task: accuracy after each completed training stage."""
    acc = report.acc_matrix.acc
    n_stages, n_tasks = acc.shape
    cv = _Canvas(f"per-task accuracy ({report.method}, seed {report.seed})",
                 "trained through task", "class-incremental accuracy",
                 (0, max(1, n_stages - 1)), (0.0, 1.0))
    for i in range(n_tasks):
        xs = [t for t in range(n_stages) if not np.isnan(acc[t, i])]
        if not xs:
            continue
        cv.polyline(xs, [acc[t, i] for t in xs], _color(i),
                    label=report.task_names[i])
    return cv.render()


def acc_fgt_scatter_svg(reports) -> str:
    """Final accuracy against forgetting, one labeled point per run."""
    pts = []
    for r in reports:
        fgt = r.metrics.get("fgt")
        acc = r.metrics.get("acc")
        if fgt is None or acc is None:
            continue
        pts.append((r, float(fgt), float(acc)))
    fgts = [p[1] for p in pts] or [0.0]
    cv = _Canvas("accuracy vs forgetting", "forgetting (lower is better)",
                 "final class-incremental accuracy",
                 (min(0.0, min(fgts)), max(0.05, max(fgts)) * 1.1), (0.0, 1.0))
    for i, (r, fgt, acc) in enumerate(pts):
        cv.point(fgt, acc, _color(i), label=f"{r.method}/s{r.seed}",
                 data={"fgt": fgt, "acc": acc, "method": r.method,
                       "seed": r.seed})
    return cv.render()


def confidence_boxes_svg(report) -> str:
    """Distribution of the true class's probability per task, final model."""
    summaries = report.confidence_summaries
    cv = _Canvas(f"target-class confidence ({report.method}, seed {report.seed})",
                 "task", "probability of true class",
                 (-0.5, len(summaries) - 0.5), (0.0, 1.0))
    for s in summaries:
        cv.box(s["task"], 0.5, s, _color(s["task"]))
    return cv.render()
