"""Minimal static SVG charts. Output is a pure function of the input data."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 55
TUBULAR = "#c0392b"
BIFURCATING = "#2e6fbd"


def _f(x):
    return f"{x:.2f}"


def _nice_ticks(lo, hi, n=5):
    if not np.isfinite(lo) or not np.isfinite(hi):
        return []
    if hi == lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


class _Axes:
    def __init__(self, xlim, ylim, title, xlabel, ylabel):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 1, self.y1 + 1
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="16" y="{H / 2}" text-anchor="middle" '
            f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>',
            f'<rect x="{LEFT}" y="{TOP}" width="{W - LEFT - RIGHT}" height="{H - TOP - BOTTOM}" '
            'fill="none" stroke="black"/>',
        ]
        for t in _nice_ticks(self.x0, self.x1):
            x = self.px(t)
            self.parts.append(f'<line x1="{_f(x)}" y1="{H - BOTTOM}" x2="{_f(x)}" '
                              f'y2="{H - BOTTOM + 5}" stroke="black"/>')
            self.parts.append(f'<text x="{_f(x)}" y="{H - BOTTOM + 18}" '
                              f'text-anchor="middle">{t:.4g}</text>')
        for t in _nice_ticks(self.y0, self.y1):
            y = self.py(t)
            self.parts.append(f'<line x1="{LEFT - 5}" y1="{_f(y)}" x2="{LEFT}" y2="{_f(y)}" '
                              'stroke="black"/>')
            self.parts.append(f'<text x="{LEFT - 8}" y="{_f(y + 4)}" '
                              f'text-anchor="end">{t:.4g}</text>')

    def px(self, x):
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, y):
        return H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)

    def points(self, xs, ys, colour, r=2.0):
        for x, y in zip(xs, ys):
            self.parts.append(f'<circle cx="{_f(self.px(x))}" cy="{_f(self.py(y))}" r="{r}" '
                              f'fill="{colour}"/>')

    def line(self, x0, y0, x1, y1, colour="black", dash=False, width=1.5):
        extra = ' stroke-dasharray="6 4"' if dash else ""
        self.parts.append(f'<line x1="{_f(self.px(x0))}" y1="{_f(self.py(y0))}" '
                          f'x2="{_f(self.px(x1))}" y2="{_f(self.py(y1))}" stroke="{colour}" '
                          f'stroke-width="{width}"{extra}/>')

    def text(self, x, y, s, anchor="start"):
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}">{escape(s)}</text>')

    def render(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _limits(values, pad=0.05):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo or max(abs(hi), 1.0)
    return lo - pad * span, hi + pad * span


def profile_svg(airway_id, profile, result) -> str:
    """Log area against arc length with the fitted line; bifurcating sections in blue."""
    use = profile.valid
    x = profile.arc_length[use]
    y = np.log(profile.area[use])
    flags = profile.bifurcation[use]
    ax = _Axes(_limits(profile.arc_length), _limits(y),
               f"Airway {airway_id}: taper {result.slope:.5f} /mm",
               "arc length (mm)", "log cross-sectional area (log mm^2)")
    ax.points(x[~flags], y[~flags], TUBULAR)
    ax.points(x[flags], y[flags], BIFURCATING)
    xa, xb = ax.x0, ax.x1
    ax.line(xa, result.intercept + result.slope * xa, xb, result.intercept + result.slope * xb)
    ax.text(W - RIGHT - 8, TOP + 16, f"SEE {result.see:.4f}, n={result.n_used}", anchor="end")
    return ax.render()


def box_svg(groups: dict, title="Taper rate by group", ylabel="taper rate (1/mm)") -> str:
    """Box plots (median, quartiles, 1.5 IQR whiskers) plus the raw points."""
    allv = [v for vals in groups.values() for v in vals]
    ax = _Axes((0.0, len(groups) + 1.0), _limits(allv), title, "", ylabel)
    for i, (label, vals) in enumerate(groups.items(), start=1):
        v = np.sort(np.asarray(vals, dtype=float))
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        iqr = q3 - q1
        lo = v[v >= q1 - 1.5 * iqr].min()
        hi = v[v <= q3 + 1.5 * iqr].max()
        x0, x1 = ax.px(i - 0.25), ax.px(i + 0.25)
        ax.parts.append(f'<rect x="{_f(x0)}" y="{_f(ax.py(q3))}" width="{_f(x1 - x0)}" '
                        f'height="{_f(ax.py(q1) - ax.py(q3))}" fill="#eeeeee" stroke="black"/>')
        ax.line(i - 0.25, med, i + 0.25, med, width=2.5)
        ax.line(i, q3, i, hi)
        ax.line(i, q1, i, lo)
        ax.points(np.full(v.size, float(i)), v, TUBULAR, r=2.5)
        ax.text(ax.px(i), H - BOTTOM + 34, f"{label} (n={v.size})", anchor="middle")
    return ax.render()


def bland_altman_svg(a, b, result, title="Bland-Altman") -> str:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mean = (a + b) / 2.0
    diff = a - b
    lo, hi = result.limits
    ax = _Axes(_limits(mean), _limits(list(diff) + [lo, hi]), title,
               "mean of paired values", "difference (a - b)")
    ax.points(mean, diff, TUBULAR, r=3)
    ax.line(ax.x0, result.mean_diff, ax.x1, result.mean_diff)
    ax.line(ax.x0, lo, ax.x1, lo, colour=BIFURCATING, dash=True)
    ax.line(ax.x0, hi, ax.x1, hi, colour=BIFURCATING, dash=True)
    return ax.render()
