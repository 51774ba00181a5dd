"""Smooth, arc-length-parameterised centrelines from voxel paths."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline, PPoly

logger = logging.getLogger(__name__)

_GL_NODES, _GL_WEIGHTS = leggauss(5)


class CentrelineError(ValueError):
    pass


@dataclass(frozen=True)
class CentrelineSample:
    position: np.ndarray
    tangent: np.ndarray
    arc_length: float
    param: float


def recentre(path, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Five-point moving average of a voxel path, in world mm.

    The window shrinks to three points next to the ends; the end points
    themselves are left where they are.
    """
    vox = path.as_array() if hasattr(path, "as_array") else np.asarray(path, dtype=float)
    if len(vox) < 2:
        raise CentrelineError("path needs at least two points")
    pts = np.asarray(origin, dtype=float) + vox * np.asarray(spacing, dtype=float)
    out = pts.copy()
    n = len(pts)
    for i in range(1, n - 1):
        half = min(2, i, n - 1 - i)
        out[i] = pts[i - half:i + half + 1].mean(axis=0)
    return out


class SplineCurve:
    """Interpolating curve through 3D points, parameterised by cumulative
    chord length (mm).

    Four or more points give a natural cubic spline. Two or three points fall
    back to a line or a quadratic, and ``fallback`` names which.
    """

    def __init__(self, control_points, knots, poly: PPoly, fallback=None):
        self.control_points = control_points
        self.knots = knots
        self.poly = poly
        self.fallback = fallback
        self._dpoly = poly.derivative()

    @property
    def length_param(self) -> float:
        return float(self.knots[-1])

    def __call__(self, t):
        return self.poly(t)

    def derivative(self, t):
        return self._dpoly(t)

    def _speed(self, t):
        return np.linalg.norm(self._dpoly(t), axis=-1)

    def arc_length(self, t0: float, t1: float, tol: float = 1e-9) -> float:
        """Length of the curve between two parameter values."""
        if t1 < t0:
            return -self.arc_length(t1, t0, tol)
        cuts = self.knots[(self.knots > t0) & (self.knots < t1)]
        edges = np.concatenate([[t0], cuts, [t1]])
        return float(sum(_adaptive_gl(self._speed, a, b, tol) for a, b in zip(edges, edges[1:])))

    @property
    def segment_coefficients(self):
        return self.poly.c


def _gl(f, a, b):
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    return half * float(np.dot(_GL_WEIGHTS, f(mid + half * _GL_NODES)))


def _adaptive_gl(f, a, b, tol, depth=0):
    whole = _gl(f, a, b)
    m = 0.5 * (a + b)
    left, right = _gl(f, a, m), _gl(f, m, b)
    if abs(left + right - whole) <= tol * max(1.0, abs(whole)) or depth > 30:
        return left + right
    return _adaptive_gl(f, a, m, tol, depth + 1) + _adaptive_gl(f, m, b, tol, depth + 1)


def fit_spline(points) -> SplineCurve:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise CentrelineError("centreline points must be finite")
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
    if not keep.all():
        logger.warning("collapsed %d duplicate consecutive centreline points", int((~keep).sum()))
        pts = pts[keep]
    if len(pts) < 2:
        raise CentrelineError("need at least two distinct points to fit a curve")
    knots = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])

    if len(pts) >= 4:
        return SplineCurve(pts, knots, CubicSpline(knots, pts, bc_type="natural"))
    if len(pts) == 2:
        poly = PPoly(np.stack([(pts[1] - pts[0]) / knots[1], pts[0]])[:, None, :], knots)
        return SplineCurve(pts, knots, poly, fallback="linear")
    coef = np.polyfit(knots, pts, 2)          # (3 powers, 3 coords), highest first
    return SplineCurve(pts, knots, PPoly(coef[:, None, :], knots[[0, -1]]), fallback="quadratic")


def sample_curve(c: SplineCurve, step: float = 0.25) -> list:
    """Positions, unit tangents and arc lengths every ``step`` of parameter.

    The final parameter value is always included, so a step longer than the
    curve yields its two ends.
    """
    if not step > 0:
        raise CentrelineError("sampling step must be positive")
    end = c.length_param
    params = np.arange(0.0, end + 1e-9 * max(end, 1.0), step)
    params = params[params <= end]
    if end - params[-1] > 1e-9 * max(end, 1.0):
        params = np.append(params, end)
    else:
        params[-1] = end
    pos = c(params)
    deriv = c.derivative(params)
    speed = np.linalg.norm(deriv, axis=1)
    bad = np.flatnonzero(speed < 1e-12)
    if bad.size:
        raise CentrelineError(f"zero derivative at parameter {params[bad[0]]:.6g}")
    tangents = deriv / speed[:, None]
    arcs = np.zeros(len(params))
    for i in range(1, len(params)):
        arcs[i] = arcs[i - 1] + c.arc_length(params[i - 1], params[i])
    return [CentrelineSample(pos[i], tangents[i], float(arcs[i]), float(params[i]))
            for i in range(len(params))]


def write_samples_csv(path, rows):
    """Debug dump; ``rows`` is an iterable of ``(airway_id, samples)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["airway_id", "param_mm", "x", "y", "z", "tx", "ty", "tz", "arclen_mm"])
        for airway_id, samples in rows:
            for s in samples:
                w.writerow([airway_id, f"{s.param:.6f}", *(f"{v:.6f}" for v in s.position),
                            *(f"{v:.9f}" for v in s.tangent), f"{s.arc_length:.6f}"])
