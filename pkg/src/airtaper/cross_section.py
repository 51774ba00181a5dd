"""Perpendicular plane reconstruction, ray-cast lumen edges and ellipse fits."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume, sample_points

logger = logging.getLogger(__name__)

HIT = "hit"
NO_SEG_EDGE = "no_seg_edge"
NO_HALF_MAX = "no_half_max"


class CrossSectionError(ValueError):
    pass


@dataclass(frozen=True)
class PlanePatch:
    centre: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    pixel_size: float
    extent: float
    pixels: np.ndarray
    outside_fraction: float = 0.0

    @property
    def centre_index(self) -> float:
        return (self.pixels.shape[0] - 1) / 2.0


@dataclass(frozen=True)
class BoundaryPointSet:
    points: np.ndarray          # (n_hits, 2), plane mm
    ray_status: tuple
    angles: np.ndarray          # angle of every ray, hit or not

    @property
    def hit_fraction(self) -> float:
        return self.ray_status.count(HIT) / max(len(self.ray_status), 1)


@dataclass(frozen=True)
class EllipseFit:
    centre: np.ndarray
    semi_axes: tuple
    rotation: float
    residual: float

    @property
    def area(self) -> float:
        return math.pi * self.semi_axes[0] * self.semi_axes[1]

    @property
    def equivalent_diameter(self) -> float:
        return 2.0 * math.sqrt(self.semi_axes[0] * self.semi_axes[1])


@dataclass
class CrossSection:
    index: int
    arc_length: float
    centre: np.ndarray
    tangent: np.ndarray
    ellipse: EllipseFit | None = None
    boundary: BoundaryPointSet | None = None
    area: float = float("nan")
    diameter: float = float("nan")
    valid: bool = False
    reason: str = ""
    bifurcation: bool = False
    patches: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class MeasureConfig:
    """Knobs of the per-section measurement; defaults follow the published pipeline."""

    pixel_size: float = 0.3
    extent: float = 40.0
    n_rays: int = 50
    samples_per_pixel: int = 5
    interpolation: str = "tricubic"
    diameter_offset_mm: float = 0.0
    min_hit_fraction: float = 0.6
    max_outside_fraction: float = 0.25


# --------------------------------------------------------------------------
# plane reconstruction

def plane_basis(tangent):
    """Orthonormal basis ``(v1, v2)`` of the plane perpendicular to ``tangent``.

    The helper axis is the canonical axis along the smallest component of
    the tangent, so it can never be collinear with it.
    """
    t = np.asarray(tangent, dtype=float)
    norm = np.linalg.norm(t)
    if not np.isfinite(norm) or norm == 0:
        raise CrossSectionError("tangent must be a finite non-zero vector")
    t = t / norm
    a = np.zeros(3)
    a[int(np.argmin(np.abs(t)))] = 1.0
    v1 = np.cross(a, t)
    v1 /= np.linalg.norm(v1)
    v2 = np.cross(v1, t)
    return v1, v2


def resample_plane(v: Volume, centre, tangent, pixel_size: float = 0.3,
                   extent: float = 40.0, method: str = "tricubic") -> PlanePatch:
    """Sample ``v`` on a square grid perpendicular to ``tangent``.

    Binary volumes are clamped to [0, 1] after interpolation. Pixels beyond
    the volume are filled with clamped-edge values and counted in
    ``outside_fraction``.
    """
    if pixel_size <= 0 or extent <= 0:
        raise CrossSectionError("pixel size and extent must be positive")
    n = int(math.floor(extent / pixel_size + 1e-9))
    if n < 3:
        raise CrossSectionError("plane must be at least 3 pixels wide")
    centre = np.asarray(centre, dtype=float)
    v1, v2 = plane_basis(tangent)
    offs = (np.arange(n) - (n - 1) / 2.0) * pixel_size
    grid = (centre + offs[:, None, None] * v1 + offs[None, :, None] * v2).reshape(-1, 3)
    vals, outside = sample_points(v, grid, method, clamp=True)
    if v.kind == "binary":
        vals = np.clip(vals, 0.0, 1.0)
    return PlanePatch(centre, v1, v2, float(pixel_size), float(extent),
                      vals.reshape(n, n), float(outside.mean()))


# --------------------------------------------------------------------------
# FWHM edge location

def _local_maxima(rc):
    tol = 1e-9 * (float(np.ptp(rc)) + 1.0)
    inner = rc[1:-1]
    ok = (inner - rc[:-2] > tol) & (inner - rc[2:] >= -tol)
    return np.flatnonzero(ok) + 1


def ray_edge(rb, rc):
    """Locate the lumen edge on one ray.

    ``rb`` is the segmentation profile and ``rc`` the intensity profile,
    both sampled outward from the plane centre. Returns ``(status, index)``
    where ``index`` is a fractional sample position, or ``None`` on failure.
    """
    rb = np.asarray(rb, dtype=float)
    rc = np.asarray(rc, dtype=float)
    below = np.flatnonzero(rb < 0.5)
    if below.size == 0:
        return NO_SEG_EDGE, None
    s = int(below[0])
    peaks = _local_maxima(rc)
    # interpolation ringing leaves shallow bumps inside the lumen; a wall
    # maximum is never darker than the profile at the segmentation edge
    peaks = peaks[rc[peaks] >= rc[s]]
    if peaks.size == 0:
        return NO_HALF_MAX, None
    # nearest to s; argmin picks the smaller index on ties
    x_max = int(peaks[np.argmin(np.abs(peaks - s))])
    x_min = int(np.argmin(rc[:x_max + 1]))
    i_max, i_min = rc[x_max], rc[x_min]
    if not i_max > i_min:
        return NO_HALF_MAX, None
    half = 0.5 * (i_max + i_min)
    for i in range(x_min, x_max):
        lo, hi = rc[i], rc[i + 1]
        if lo == half:
            return HIT, float(i)
        if lo < half <= hi:
            return HIT, i + (half - lo) / (hi - lo)
    return NO_HALF_MAX, None


def _bilinear(img, rows, cols):
    n0, n1 = img.shape
    r0 = np.clip(np.floor(rows).astype(np.intp), 0, n0 - 2)
    c0 = np.clip(np.floor(cols).astype(np.intp), 0, n1 - 2)
    fr = rows - r0
    fc = cols - c0
    return ((1 - fr) * (1 - fc) * img[r0, c0] + fr * (1 - fc) * img[r0 + 1, c0]
            + (1 - fr) * fc * img[r0, c0 + 1] + fr * fc * img[r0 + 1, c0 + 1])


def fwhm_esl(binary_patch: PlanePatch, ct_patch: PlanePatch, n_rays: int = 50,
             samples_per_pixel: int = 5) -> BoundaryPointSet:
    """Cast rays from the plane centre and find the lumen wall on each.

    Rays run to the inscribed circle of the patch and are sampled by
    bilinear interpolation every ``1 / samples_per_pixel`` of a pixel.
    """
    if binary_patch.pixels.shape != ct_patch.pixels.shape:
        raise CrossSectionError("binary and CT patches differ in shape")
    c = binary_patch.centre_index
    ps = binary_patch.pixel_size
    ci = int(round(c))
    if binary_patch.pixels[ci, ci] < 0.5:
        raise CrossSectionError("plane centre lies outside the lumen")
    n_samples = int(math.floor(c * samples_per_pixel)) + 1
    radii_px = np.arange(n_samples) / samples_per_pixel
    angles = 2.0 * np.pi * np.arange(n_rays) / n_rays
    rows = c + np.cos(angles)[:, None] * radii_px
    cols = c + np.sin(angles)[:, None] * radii_px
    rb = _bilinear(binary_patch.pixels, rows, cols)
    rc = _bilinear(ct_patch.pixels, rows, cols)

    points, status = [], []
    for k in range(n_rays):
        st, idx = ray_edge(rb[k], rc[k])
        status.append(st)
        if st == HIT:
            r = idx * ps / samples_per_pixel
            points.append((r * math.cos(angles[k]), r * math.sin(angles[k])))
    return BoundaryPointSet(np.array(points, dtype=float).reshape(-1, 2), tuple(status), angles)


# --------------------------------------------------------------------------
# ellipse fitting

def fit_ellipse(points) -> EllipseFit:
    """Direct least-squares ellipse fit with the ``4AC - B^2 = 1`` constraint.

    Uses the partitioned scatter-matrix form of the constrained
    generalised eigenproblem on centred, scale-normalised coordinates.
    """
    pts = points.points if isinstance(points, BoundaryPointSet) else points
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if len(pts) < 6:
        raise CrossSectionError(f"ellipse fit needs at least 6 points, got {len(pts)}")
    mean = pts.mean(axis=0)
    scale = math.sqrt(((pts - mean) ** 2).sum(axis=1).mean())
    if scale == 0:
        raise CrossSectionError("degenerate point set")
    x, y = ((pts - mean) / scale).T

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise CrossSectionError("degenerate point set (collinear)") from None
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    _, vecs = np.linalg.eig(m)
    vecs = np.real(vecs)
    cond = 4.0 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise CrossSectionError("no elliptical solution")
    a1 = vecs[:, ok[np.argmax(cond[ok])]] if ok.size > 1 else vecs[:, ok[0]]
    conic = np.concatenate([a1, t @ a1])
    return _conic_to_ellipse(conic, pts, mean, scale)


def _conic_to_ellipse(conic, pts, mean, scale):
    A, B, C, D, E, F = conic
    det = 4 * A * C - B * B
    if det <= 0:
        raise CrossSectionError("fitted conic is not an ellipse")
    x0 = (B * E - 2 * C * D) / det
    y0 = (B * D - 2 * A * E) / det
    f0 = A * x0 * x0 + B * x0 * y0 + C * y0 * y0 + D * x0 + E * y0 + F
    lam, vec = np.linalg.eigh(np.array([[A, B / 2], [B / 2, C]]))
    with np.errstate(invalid="ignore", divide="ignore"):
        axes = np.sqrt(-f0 / lam)
    if not np.all(np.isfinite(axes)) or np.any(axes <= 0):
        raise CrossSectionError("fitted conic is an imaginary ellipse")
    major = int(np.argmax(axes))
    rot = math.atan2(vec[1, major], vec[0, major]) % math.pi
    a, b = float(axes[major]) * scale, float(axes[1 - major]) * scale
    centre = np.array([x0, y0]) * scale + mean

    # first-order geometric distance of every point to the conic
    u, w = ((pts - mean) / scale).T
    val = A * u * u + B * u * w + C * w * w + D * u + E * w + F
    gx = 2 * A * u + B * w + D
    gy = B * u + 2 * C * w + E
    dist = val / np.maximum(np.hypot(gx, gy), 1e-300) * scale
    return EllipseFit(centre, (a, b), rot, float(np.sqrt(np.mean(dist ** 2))))


# --------------------------------------------------------------------------
# whole-airway measurement

def measure_section(ct: Volume, seg: Volume, sample, index: int = 0,
                    config: MeasureConfig = MeasureConfig(), keep_patches: bool = False):
    sec = CrossSection(index, float(sample.arc_length), np.asarray(sample.position),
                       np.asarray(sample.tangent))
    ct_patch = resample_plane(ct, sample.position, sample.tangent, config.pixel_size,
                              config.extent, config.interpolation)
    seg_patch = resample_plane(seg, sample.position, sample.tangent, config.pixel_size,
                               config.extent, config.interpolation)
    if keep_patches:
        sec.patches = (seg_patch, ct_patch)
    if seg_patch.outside_fraction > config.max_outside_fraction:
        sec.reason = "plane_out_of_bounds"
        return sec
    try:
        boundary = fwhm_esl(seg_patch, ct_patch, config.n_rays, config.samples_per_pixel)
    except CrossSectionError:
        sec.reason = "centre_outside_lumen"
        return sec
    sec.boundary = boundary
    if boundary.hit_fraction < config.min_hit_fraction:
        sec.reason = "too_few_ray_hits"
        return sec
    try:
        sec.ellipse = fit_ellipse(boundary)
    except CrossSectionError:
        sec.reason = "ellipse_fit_failed"
        return sec
    sec.diameter = sec.ellipse.equivalent_diameter + config.diameter_offset_mm
    if config.diameter_offset_mm == 0:
        sec.area = sec.ellipse.area
    else:
        sec.area = math.pi * (sec.diameter / 2.0) ** 2
    if not sec.diameter > 0:
        sec.reason = "non_positive_diameter"
        return sec
    sec.valid = True
    return sec


def measure_airway(ct: Volume, seg: Volume, samples, config: MeasureConfig = MeasureConfig(),
                   n_jobs: int = 1, keep_patches: bool = False) -> list:
    """Measure every centreline sample; failed sections are kept with a reason."""
    if ct.dims != seg.dims or not np.allclose(ct.spacing, seg.spacing) \
            or not np.allclose(ct.origin, seg.origin):
        raise CrossSectionError("CT and segmentation are not on the same grid")
    samples = list(samples)

    def one(i):
        return measure_section(ct, seg, samples[i], i, config, keep_patches)

    if n_jobs == 1 or len(samples) < 2:
        sections = [one(i) for i in range(len(samples))]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            sections = list(pool.map(one, range(len(samples))))
    if sections and not any(s.valid for s in sections):
        reasons = sorted({s.reason for s in sections})
        raise CrossSectionError(f"every cross-section failed ({', '.join(reasons)})")
    return sections


SECTION_COLUMNS = ["airway_id", "section_idx", "arclen_mm", "area_mm2", "diam_equiv_mm",
                   "a_mm", "b_mm", "rot_rad", "valid", "reason", "bifurcation_flag"]


def _fmt(x, digits=6):
    return "" if x is None or not np.isfinite(x) else f"{x:.{digits}f}"


def write_sections_csv(path, airway_id, sections, flags=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECTION_COLUMNS)
        for k, s in enumerate(sections):
            e = s.ellipse
            flag = bool(flags[k]) if flags is not None else s.bifurcation
            w.writerow([airway_id, s.index, _fmt(s.arc_length), _fmt(s.area), _fmt(s.diameter),
                        _fmt(e.semi_axes[0] if e else None), _fmt(e.semi_axes[1] if e else None),
                        _fmt(e.rotation if e else None), int(s.valid), s.reason, int(flag)])
