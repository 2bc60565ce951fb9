"""Minimal static SVG figures (ROC curves, stratified box plots).

Output is plain text built from fixed-precision numbers, so identical inputs
give byte-identical files. The only version-dependent content is the
generator comment on the second line.
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np

from ._io import atomic_write_text

GENERATOR_PREFIX = "<!-- generator: vbmstat"
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("vbmstat")
    except Exception:
        return "unknown"


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Svg:
    def __init__(self, width: int, height: int):
        self.w, self.h = width, height
        self.parts: List[str] = []

    def add(self, s: str) -> None:
        self.parts.append(s)

    def line(self, x1, y1, x2, y2, stroke="#000", dash=None, width=1.0):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" stroke="{stroke}" stroke-width="{width}"{d}/>')

    def text(self, x, y, s, size=11, anchor="middle"):
        s = s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{s}</text>')

    def render(self) -> str:
        head = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f"{GENERATOR_PREFIX} {_version()} -->",
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" viewBox="0 0 {self.w} {self.h}">',
            f'<rect x="0" y="0" width="{self.w}" height="{self.h}" fill="#fff"/>',
        ]
        return "\n".join(head + self.parts + ["</svg>"]) + "\n"


def roc_svg(curves: Sequence[Tuple[str, np.ndarray, np.ndarray, float]], title: str = "ROC") -> str:
    """One polyline per ``(label, fpr, tpr, auc)`` plus the chance diagonal."""
    size, m = 420, 50
    side = size - 2 * m
    svg = _Svg(size, size)

    def px(x, y):
        return m + x * side, m + (1 - y) * side

    svg.add(f'<rect x="{m}" y="{m}" width="{side}" height="{side}" fill="none" stroke="#000"/>')
    for v in np.linspace(0, 1, 6):
        x, y = px(v, 0)
        svg.line(x, y, x, y + 4)
        svg.text(x, y + 16, f"{v:.1f}", size=9)
        x, y = px(0, v)
        svg.line(x - 4, y, x, y)
        svg.text(x - 6, y + 3, f"{v:.1f}", size=9, anchor="end")
    svg.line(*px(0, 0), *px(1, 1), stroke="#888", dash="4,4")
    svg.add('<g id="chance"/>')
    for i, (label, fpr, tpr, auc) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in (px(x, y) for x, y in zip(fpr, tpr)))
        svg.add(f'<polyline class="roc" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = m + side - 12 - 14 * (len(curves) - 1 - i)
        svg.line(m + side - 150, ly - 4, m + side - 135, ly - 4, stroke=color, width=2)
        svg.text(m + side - 130, ly, f"{label} (AUC={auc:.3f})", size=10, anchor="start")
    svg.text(size / 2, size - 12, "False positive rate")
    svg.add(f'<text x="14" y="{size / 2}" font-size="11" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 14 {size / 2})">True positive rate</text>')
    svg.text(size / 2, 24, title, size=13)
    return svg.render()


def _box_stats(x: np.ndarray):
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo = x[x >= q1 - 1.5 * iqr].min()
    hi = x[x <= q3 + 1.5 * iqr].max()
    return q1, med, q3, lo, hi


def stratified_svg(groups: Dict[str, Dict[str, np.ndarray]], strata=("APOE4-", "APOE4+"), title="") -> str:
    """Box plots per (group, stratum) on the left, mean +/- SE on the right."""
    w, h, m = 760, 380, 50
    panel = (w - 3 * m) / 2
    svg = _Svg(w, h)
    vals = np.concatenate([np.asarray(v, float) for g in groups.values() for v in g.values() if len(v)])
    lo, hi = float(vals.min()), float(vals.max())
    pad = 0.05 * (hi - lo or 1.0)
    lo, hi = lo - pad, hi + pad

    def py(v):
        return m + (hi - v) / (hi - lo) * (h - 2 * m)

    names = list(groups)
    slot = panel / max(len(names), 1)
    for k, x0 in enumerate((m, 2 * m + panel)):
        svg.add(f'<rect x="{_f(x0)}" y="{m}" width="{_f(panel)}" height="{h - 2 * m}" fill="none" stroke="#000"/>')
        for v in np.linspace(lo, hi, 5):
            svg.line(x0 - 4, py(v), x0, py(v))
            svg.text(x0 - 6, py(v) + 3, f"{v:.3f}", size=9, anchor="end")
        for gi, g in enumerate(names):
            cx = x0 + slot * (gi + 0.5)
            for si, s in enumerate(strata):
                x = np.asarray(groups[g].get(s, []), float)
                if x.size == 0:
                    continue
                color = PALETTE[si % len(PALETTE)]
                bx = cx + (si - (len(strata) - 1) / 2) * slot * 0.3
                if k == 0:
                    q1, med, q3, wl, wh = _box_stats(x)
                    bw = slot * 0.22
                    svg.add(
                        f'<rect class="box" x="{_f(bx - bw / 2)}" y="{_f(py(q3))}" width="{_f(bw)}" '
                        f'height="{_f(py(q1) - py(q3))}" fill="none" stroke="{color}"/>'
                    )
                    svg.line(bx - bw / 2, py(med), bx + bw / 2, py(med), stroke=color, width=2)
                    svg.line(bx, py(q3), bx, py(wh), stroke=color)
                    svg.line(bx, py(q1), bx, py(wl), stroke=color)
                else:
                    mu = x.mean()
                    se = x.std(ddof=1) / np.sqrt(x.size) if x.size > 1 else 0.0
                    svg.line(bx, py(mu - se), bx, py(mu + se), stroke=color)
                    svg.add(f'<circle class="mean" cx="{_f(bx)}" cy="{_f(py(mu))}" r="3" fill="{color}"/>')
            label = g if k else f"{g} (" + "/".join(str(len(groups[g].get(s, []))) for s in strata) + ")"
            svg.text(cx, h - m + 16, label, size=10)
        svg.text(x0 + panel / 2, m - 8, "Distribution" if k == 0 else "Mean +/- SE", size=11)
    for si, s in enumerate(strata):
        svg.line(w - m - 120 + si * 60, h - 12, w - m - 108 + si * 60, h - 12, stroke=PALETTE[si], width=2)
        svg.text(w - m - 104 + si * 60, h - 8, s, size=10, anchor="start")
    if title:
        svg.text(w / 2, 18, title, size=13)
    return svg.render()


def strip_generator(svg: str) -> str:
    """Drop the generator comment so outputs can be compared across versions."""
    return "\n".join(l for l in svg.split("\n") if not l.startswith(GENERATOR_PREFIX))


def write_svg(text: str, path) -> None:
    atomic_write_text(path, text)
