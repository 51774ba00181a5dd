"""Voxelised tube phantoms with analytic ground truth.

Tubes are open-ended hollow cylinders (lumen inside a wall of fixed
thickness) rendered with partial-volume averaging. Each family is described
by a :class:`TubeSpec`; :func:`generate_phantom` lays them out on a grid and
returns the CT-like intensity volume, the binary lumen segmentation and the
ground truth needed to score a measurement.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .volume import Volume

logger = logging.getLogger(__name__)

FAMILIES = ("straight", "curved", "tapered", "exponential", "bifurcation")
DEFAULT_SPACING = (0.625, 0.625, 1.0)
DEFAULT_ATTENUATION = (-1000.0, 0.0, -800.0)

DESIGN_DIAMETERS = (1.1, 2.5, 3.9, 5.3, 6.7)
DESIGN_CURVATURE_RADII = (30.0, 25.0, 20.0, 15.0, 10.0)
# diameter gradient and stated end diameter for each tapering tube
DESIGN_TAPERS = ((0.051, 5.1), (0.083, 6.7), (0.109, 8.0), (0.132, 9.1), (0.168, 10.4))


class PhantomError(ValueError):
    pass


def linear_taper_diameter(z: float, t: float, d0: float = 2.5) -> float:
    """Diameter of a linearly tapering tube at arc length ``z`` from its tip."""
    if z < 0:
        raise PhantomError("arc length must be non-negative")
    d = d0 + z * t
    if d <= 0:
        raise PhantomError(f"diameter {d} at z={z} is not positive")
    return d


@dataclass
class TubeSpec:
    """One tube of a phantom.

    ``start`` is the world position (mm) of the centreline tip and
    ``direction`` the initial tangent. Curved tubes bend towards
    ``bend_normal``; bifurcating tubes split at ``parent_length`` into a
    measured daughter deviating by ``branch_angles[0]`` degrees and a sibling
    deviating by ``branch_angles[1]`` degrees to the other side.
    """

    family: str = "straight"
    lumen_diameter_start: float = 2.5
    diameter_gradient: float = 0.0
    curvature_radius: float | None = None
    area_rate: float = 0.0
    length: float = 50.0
    wall_thickness: float = 1.7
    attenuation: tuple = DEFAULT_ATTENUATION
    start: tuple | None = None
    direction: tuple = (0.0, 0.0, 1.0)
    bend_normal: tuple = (1.0, 0.0, 0.0)
    parent_length: float = 25.0
    branch_angles: tuple = (20.0, 40.0)
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise PhantomError(f"unknown tube family {self.family!r}")
        if self.length <= 0 or self.wall_thickness < 0 or self.lumen_diameter_start <= 0:
            raise PhantomError("length and diameters must be positive")
        if self.family == "curved":
            if self.curvature_radius is None:
                raise PhantomError("curved tube needs a curvature radius")
            outer = self.lumen_diameter_start / 2 + self.wall_thickness
            if self.curvature_radius <= outer:
                raise PhantomError("curvature radius must exceed lumen radius plus wall")
            if self.length >= 2 * math.pi * self.curvature_radius:
                raise PhantomError("curved tube would close on itself")
        if self.family == "tapered":
            linear_taper_diameter(self.length, self.diameter_gradient, self.lumen_diameter_start)
        if self.family == "bifurcation" and not 0 < self.parent_length < self.length:
            raise PhantomError("parent length must lie inside the tube length")
        self.attenuation = tuple(float(a) for a in self.attenuation)
        self.direction = tuple(float(a) for a in self.direction)
        self.bend_normal = tuple(float(a) for a in self.bend_normal)
        if self.start is not None:
            self.start = tuple(float(a) for a in self.start)
        self.branch_angles = tuple(float(a) for a in self.branch_angles)

    def diameter(self, s):
        s = np.asarray(s, dtype=float)
        d0 = self.lumen_diameter_start
        if self.family == "tapered":
            return d0 + s * self.diameter_gradient
        if self.family == "exponential":
            return d0 * np.exp(0.5 * self.area_rate * s)
        return np.full_like(s, d0)


# --------------------------------------------------------------------------
# geometry primitives; sdf() returns signed distances (negative inside) to
# the lumen and outer wall surfaces plus their unit normals

def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise PhantomError("zero-length direction vector")
    return v / n


def _pick(terms, normals):
    """Max of several signed distances with the normal of the winner."""
    terms = np.stack(terms)
    which = np.argmax(terms, axis=0)
    sd = np.take_along_axis(terms, which[None], 0)[0]
    nrm = np.zeros(sd.shape + (3,))
    for k, n in enumerate(normals):
        sel = which == k
        nrm[sel] = n[sel] if np.ndim(n) == 2 else n
    return sd, nrm


class _Segment:
    """Flat-ended straight tube with a radius profile along its axis."""

    def __init__(self, p0, u, length, radius_fn, wall):
        self.p0 = np.asarray(p0, dtype=float)
        self.u = _unit(u)
        self.length = float(length)
        self.radius_fn = radius_fn
        self.wall = float(wall)

    def centreline(self, s):
        return self.p0 + np.asarray(s, dtype=float)[..., None] * self.u

    def terms(self, pts):
        rel = pts - self.p0
        h = rel @ self.u
        radial = rel - h[:, None] * self.u
        rho = np.linalg.norm(radial, axis=1)
        rad_n = radial / np.maximum(rho, 1e-12)[:, None]
        r = self.radius_fn(np.clip(h, 0.0, self.length))
        caps = [(-h, -self.u), (h - self.length, self.u)]
        return [(rho - r, rad_n)] + caps, [(rho - r - self.wall, rad_n)] + caps

    def bounds(self):
        rmax = max(self.radius_fn(0.0), self.radius_fn(self.length)) + self.wall
        ends = np.stack([self.p0, self.p0 + self.length * self.u])
        return ends.min(axis=0) - rmax, ends.max(axis=0) + rmax


class _Arc:
    """Tube bent along a circular arc of constant radius."""

    def __init__(self, p0, u, normal, bend_radius, length, radius, wall):
        self.u = _unit(u)
        n = np.asarray(normal, dtype=float)
        n = _unit(n - (n @ self.u) * self.u)
        self.R = float(bend_radius)
        self.length = float(length)
        self.phi_end = self.length / self.R
        self.radius = float(radius)
        self.wall = float(wall)
        self.p0 = np.asarray(p0, dtype=float)
        self.centre = self.p0 + self.R * n
        self.e1, self.e2 = -n, self.u
        self.e3 = np.cross(self.e1, self.e2)

    def centreline(self, s):
        phi = np.asarray(s, dtype=float)[..., None] / self.R
        return self.centre + self.R * (np.cos(phi) * self.e1 + np.sin(phi) * self.e2)

    def _tangent(self, phi):
        return -np.sin(phi)[..., None] * self.e1 + np.cos(phi)[..., None] * self.e2

    def terms(self, pts):
        q = pts - self.centre
        a, b, c = q @ self.e1, q @ self.e2, q @ self.e3
        phi = np.arctan2(b, a)
        mid = self.phi_end / 2.0
        phi = np.mod(phi - mid + math.pi, 2 * math.pi) - math.pi + mid
        on_arc = self.centreline(np.clip(phi, 0.0, self.phi_end) * self.R)
        radial = pts - on_arc
        rho = np.sqrt((np.hypot(a, b) - self.R) ** 2 + c ** 2)
        rad_n = radial / np.maximum(np.linalg.norm(radial, axis=1), 1e-12)[:, None]
        caps = [(-self.R * phi, -self._tangent(np.zeros_like(phi))),
                (self.R * (phi - self.phi_end), self._tangent(np.full_like(phi, self.phi_end)))]
        return ([(rho - self.radius, rad_n)] + caps,
                [(rho - self.radius - self.wall, rad_n)] + caps)

    def bounds(self):
        s = np.linspace(0.0, self.length, 721)
        pts = self.centreline(s)
        pad = self.radius + self.wall
        return pts.min(axis=0) - pad, pts.max(axis=0) + pad


class _Ball:
    def __init__(self, centre, radius, wall):
        self.c = np.asarray(centre, dtype=float)
        self.radius = float(radius)
        self.wall = float(wall)

    def terms(self, pts):
        rel = pts - self.c
        rho = np.linalg.norm(rel, axis=1)
        n = rel / np.maximum(rho, 1e-12)[:, None]
        return [(rho - self.radius, n)], [(rho - self.radius - self.wall, n)]

    def bounds(self):
        pad = self.radius + self.wall
        return self.c - pad, self.c + pad


class TubeGeometry:
    """Analytic shape of one placed tube."""

    def __init__(self, spec: TubeSpec):
        if spec.start is None:
            raise PhantomError("tube has no placement; call layout() first")
        self.spec = spec
        p0, u = np.asarray(spec.start), _unit(spec.direction)
        w = spec.wall_thickness
        r0 = spec.lumen_diameter_start / 2.0
        if spec.family == "curved":
            self.parts = [_Arc(p0, u, spec.bend_normal, spec.curvature_radius, spec.length, r0, w)]
        elif spec.family == "bifurcation":
            n = np.asarray(spec.bend_normal, dtype=float)
            n = _unit(n - (n @ u) * u)
            junction = p0 + spec.parent_length * u
            rest = spec.length - spec.parent_length
            a1, a2 = (math.radians(a) for a in spec.branch_angles)
            d1 = math.cos(a1) * u + math.sin(a1) * n
            d2 = math.cos(a2) * u - math.sin(a2) * n
            const = lambda h: np.full_like(np.asarray(h, dtype=float), r0)  # noqa: E731
            self.junction = junction
            self.daughters = (d1, d2)
            self.parts = [_Segment(p0, u, spec.parent_length, const, w),
                          _Segment(junction, d1, rest, const, w),
                          _Segment(junction, d2, rest, const, w),
                          _Ball(junction, r0, w)]
        else:
            self.parts = [_Segment(p0, u, spec.length, lambda h: spec.diameter(h) / 2.0, w)]

    def centreline(self, s):
        """Points on the measured centreline at arc lengths ``s`` from the tip."""
        s = np.asarray(s, dtype=float)
        if self.spec.family != "bifurcation":
            return self.parts[0].centreline(s)
        lp = self.spec.parent_length
        first = self.parts[0].centreline(np.minimum(s, lp))
        second = self.parts[1].centreline(np.maximum(s - lp, 0.0))
        return np.where((s <= lp)[..., None], first, second)

    def sibling_tip(self):
        return self.parts[2].centreline(self.parts[2].length)

    def sdf(self, pts):
        """Signed distance and normal of the lumen and outer surfaces (union of parts)."""
        lum = out = None
        for part in self.parts:
            lt, ot = part.terms(pts)
            l2 = _pick(*zip(*lt))
            o2 = _pick(*zip(*ot))
            if lum is None:
                lum, out = l2, o2
                continue
            sel = l2[0] < lum[0]
            lum = (np.where(sel, l2[0], lum[0]), np.where(sel[:, None], l2[1], lum[1]))
            sel = o2[0] < out[0]
            out = (np.where(sel, o2[0], out[0]), np.where(sel[:, None], o2[1], out[1]))
        return lum, out

    def coverage(self, pts, h, refine: int = 4):
        """Lumen and outer-wall fill of boxes of size ``h`` centred on ``pts``.

        Each part is an intersection of half-spaces, so its fill is the
        product of per-surface fills (exact where the surfaces are
        orthogonal and axis aligned); overlapping parts combine by maximum.
        Boxes crossed by more than one surface (rims, junction creases) are
        split ``refine`` times per axis and evaluated again.
        """
        h = np.asarray(h, dtype=float)
        cov_l, cov_o, crease = self._coverage_once(pts, h)
        if refine > 1 and np.any(crease):
            sub = ((np.arange(refine) + 0.5) / refine - 0.5)
            offs = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), -1).reshape(-1, 3) * h
            fine = (pts[crease][:, None, :] + offs[None]).reshape(-1, 3)
            fl, fo, _ = self._coverage_once(fine, h / refine)
            cov_l[crease] = fl.reshape(-1, len(offs)).mean(axis=1)
            cov_o[crease] = fo.reshape(-1, len(offs)).mean(axis=1)
        return np.minimum(cov_l, cov_o), cov_o

    def _coverage_once(self, pts, h):
        reach = 0.5 * float(np.linalg.norm(h))
        cov_l = np.zeros(len(pts))
        cov_o = np.zeros(len(pts))
        partial_parts = np.zeros(len(pts), dtype=int)
        crease = np.zeros(len(pts), dtype=bool)
        for part in self.parts:
            lt, ot = part.terms(pts)
            for terms in (lt, ot):
                crease |= np.sum([np.abs(sd) < reach for sd, _ in terms], axis=0) > 1
            cl = np.prod([box_coverage(sd, n, h) for sd, n in lt], axis=0)
            co = np.prod([box_coverage(sd, n, h) for sd, n in ot], axis=0)
            partial_parts += ((cl > 0) & (cl < 1)) | ((co > 0) & (co < 1))
            cov_l = np.maximum(cov_l, cl)
            cov_o = np.maximum(cov_o, co)
        crease |= partial_parts > 1
        return cov_l, cov_o, crease

    def bounds(self):
        lo, hi = zip(*(p.bounds() for p in self.parts))
        return np.min(lo, axis=0), np.max(hi, axis=0)


# --------------------------------------------------------------------------
# layout and rendering

@dataclass
class PhantomGroundTruth:
    tubes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"tubes": self.tubes}, indent=2, sort_keys=True)


@dataclass(frozen=True)
class Grid:
    dims: tuple
    spacing: tuple = DEFAULT_SPACING
    origin: tuple = (0.0, 0.0, 0.0)


def layout(specs, pitch: float = 15.0, axis: int = 0):
    """Place unplaced tubes side by side, ``pitch`` mm apart along ``axis``.

    Tube starts are snapped to voxel centres of the default grid so that thin
    lumens are centred on voxels.
    """
    out = []
    k = 0
    for spec in specs:
        if spec.start is None:
            start = [0.0, 0.0, 0.0]
            start[axis] = k * pitch
            spec = TubeSpec(**{**asdict(spec), "start": tuple(start)})
            k += 1
        out.append(spec)
    return out


def fit_grid(specs, spacing=DEFAULT_SPACING, margin: float = 21.0) -> Grid:
    """Smallest grid holding every tube with ``margin`` mm to spare.

    The origin is chosen so the first tube's start lands on a voxel centre.
    """
    geoms = [TubeGeometry(s) for s in specs]
    lo = np.min([g.bounds()[0] for g in geoms], axis=0) - margin
    hi = np.max([g.bounds()[1] for g in geoms], axis=0) + margin
    spacing = np.asarray(spacing, dtype=float)
    anchor = np.asarray(specs[0].start, dtype=float)
    origin = anchor - np.ceil((anchor - lo) / spacing) * spacing
    dims = np.ceil((hi - origin) / spacing).astype(int) + 1
    return Grid(tuple(int(d) for d in dims), tuple(spacing), tuple(float(o) for o in origin))


def _uniform_sum_cdf(t, w):
    """CDF at ``t`` of a sum of independent U(0, w_j); rows of ``w`` hold the widths."""
    k = w.shape[1]
    out = np.zeros_like(t)
    for signs in np.ndindex(*(2,) * k):
        shift = (w * np.array(signs)).sum(axis=1)
        out += (-1) ** sum(signs) * np.maximum(t - shift, 0.0) ** k
    return out / (math.factorial(k) * np.prod(w, axis=1))


def box_coverage(sd, normal, h, rel_eps=1e-4):
    """Fraction of each axis-aligned box of size ``h`` lying inside a surface.

    The surface is replaced by its tangent plane at the box centre: ``sd`` is
    the signed distance there (negative inside) and ``normal`` the unit
    outward normal. Exact for planar surfaces. Box extents projecting to less
    than ``rel_eps`` of the widest one are treated as flat.
    """
    sd = np.asarray(sd, dtype=float)
    normal = np.broadcast_to(np.asarray(normal, dtype=float), sd.shape + (3,))
    w = np.abs(normal) * np.asarray(h, dtype=float)
    total = w.sum(axis=1)
    t = total / 2.0 - sd
    out = np.where(t >= total, 1.0, 0.0)
    out[(t == total) & (total == 0)] = 0.5
    mid = (t > 0) & (t < total)
    if np.any(mid):
        wm = w[mid]
        tm = t[mid]
        active = wm > rel_eps * wm.max(axis=1, keepdims=True)
        k_active = active.sum(axis=1)
        res = np.empty_like(tm)
        for k in (1, 2, 3):
            rows = k_active == k
            if np.any(rows):
                wk = np.sort(wm[rows], axis=1)[:, 3 - k:]
                # flat directions shift the sum by half their width
                tk = tm[rows] - (wm[rows].sum(axis=1) - wk.sum(axis=1)) / 2.0
                res[rows] = _uniform_sum_cdf(tk, wk)
        out[mid] = np.clip(res, 0.0, 1.0)
    return out


def render_tube(geom, grid: Grid, supersample: int):
    """Lumen and outer-wall volume fractions of one tube inside its bounding box."""
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    lo, hi = geom.bounds()
    i0 = np.floor((lo - origin) / spacing).astype(int) - 1
    i1 = np.ceil((hi - origin) / spacing).astype(int) + 2
    dims = np.asarray(grid.dims)
    if np.any(i0 < 0) or np.any(i1 > dims):
        raise PhantomError(f"tube {geom.spec.name or geom.spec.family} exceeds the grid")
    shape = tuple(i1 - i0)
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    h = spacing / supersample
    lumen = np.zeros(shape)
    outer = np.zeros(shape)
    xs = origin[0] + (i0[0] + np.arange(shape[0]))[:, None] * spacing[0] + sub * spacing[0]
    ys = origin[1] + (i0[1] + np.arange(shape[1]))[:, None] * spacing[1] + sub * spacing[1]
    for kz in range(shape[2]):
        zc = origin[2] + (i0[2] + kz) * spacing[2] + sub * spacing[2]
        px, py, pz = np.meshgrid(xs.ravel(), ys.ravel(), zc, indexing="ij")
        pts = np.column_stack([px.ravel(), py.ravel(), pz.ravel()])
        cov_l, cov_o = geom.coverage(pts, h)
        shp = (shape[0], supersample, shape[1], supersample, supersample)
        lumen[:, :, kz] = cov_l.reshape(shp).mean(axis=(1, 3, 4))
        outer[:, :, kz] = cov_o.reshape(shp).mean(axis=(1, 3, 4))
    return tuple(i0), lumen, outer


def generate_phantom(specs, grid: Grid | None = None, *, supersample: int = 3,
                     blur_sigma_mm: float = 0.0, endpoint_inset: float = 2.0):
    """Rasterise tubes into ``(ct, segmentation, ground_truth)``.

    Voxel intensities mix the lumen, wall and background attenuations by
    volume fraction. The segmentation is the lumen at 50 % fill. An optional
    isotropic Gaussian blur (sigma in mm) stands in for the scanner kernel.
    """
    specs = list(specs)
    if not specs:
        raise PhantomError("phantom needs at least one tube")
    specs = layout(specs)
    grid = grid or fit_grid(specs)
    geoms = [TubeGeometry(s) for s in specs]
    lumen = np.zeros(grid.dims)
    outer = np.zeros(grid.dims)
    owner = np.zeros(grid.dims, dtype=np.int16)
    lumen_hu, wall_hu, bg_hu = specs[0].attenuation
    wall_term = np.zeros(grid.dims)
    lumen_term = np.zeros(grid.dims)
    for k, geom in enumerate(geoms, start=1):
        i0, fl, fo = render_tube(geom, grid, supersample)
        sl = tuple(slice(a, a + n) for a, n in zip(i0, fl.shape))
        touched = fo > 0
        if np.any(owner[sl][touched]):
            raise PhantomError(f"tube {k} overlaps another tube")
        owner[sl][touched] = k
        lumen[sl] += fl
        outer[sl] += fo
        l_hu, w_hu, _ = geom.spec.attenuation
        wall_term[sl] += fo * (w_hu - bg_hu)
        lumen_term[sl] += fl * (l_hu - w_hu)
    ct = bg_hu + wall_term + lumen_term
    if blur_sigma_mm > 0:
        ct = ndi.gaussian_filter(ct, blur_sigma_mm / np.asarray(grid.spacing), mode="nearest")
    seg = (lumen >= 0.5).astype(np.uint8)
    ct_vol = Volume(ct, grid.spacing, grid.origin, kind="intensity")
    seg_vol = Volume(seg, grid.spacing, grid.origin, kind="binary")
    truth = PhantomGroundTruth([_truth_for(g, k, ct_vol, endpoint_inset)
                                for k, g in enumerate(geoms)])
    return ct_vol, seg_vol, truth


def _truth_for(geom: TubeGeometry, k: int, vol: Volume, inset: float) -> dict:
    spec = geom.spec
    s_grid = np.linspace(0.0, spec.length, int(round(spec.length)) + 1)
    pts = geom.centreline(s_grid)
    to_vox = lambda p: [int(v) for v in np.round(vol.world_to_index(p))]  # noqa: E731
    entry = {
        "tube_id": spec.name or f"tube{k + 1}",
        "spec": {key: (list(val) if isinstance(val, tuple) else val)
                 for key, val in asdict(spec).items()},
        "centreline_arclen_mm": [round(float(s), 6) for s in s_grid],
        "centreline_mm": [[round(float(c), 6) for c in p] for p in pts],
        "diameter_start_mm": float(spec.diameter(0.0)),
        "diameter_end_mm": float(spec.diameter(spec.length)),
        "diameter_gradient": float(spec.diameter_gradient) if spec.family == "tapered" else 0.0,
        "start_voxel": to_vox(geom.centreline(inset)),
        "end_voxel": to_vox(geom.centreline(spec.length - inset)),
        "endpoint_inset_mm": inset,
    }
    if spec.family == "curved":
        entry["arc_centre_mm"] = [float(c) for c in geom.parts[0].centre]
    if spec.family == "bifurcation":
        entry["junction_mm"] = [float(c) for c in geom.junction]
        entry["junction_arclen_mm"] = float(spec.parent_length)
        tip = geom.parts[2].centreline(geom.parts[2].length - inset)
        entry["sibling_voxel"] = to_vox(tip)
    return entry


# --------------------------------------------------------------------------
# bundled designs

def design_diameters(**kw):
    return [TubeSpec("straight", d, name=f"diameter_{d}", **kw) for d in DESIGN_DIAMETERS]


def design_curvatures(**kw):
    # stacked along y so the arcs, all bending in x-z, never meet
    return [TubeSpec("curved", 2.5, curvature_radius=r, name=f"curvature_{r:g}",
                     start=(0.0, 12.5 * k, 0.0), **kw)
            for k, r in enumerate(DESIGN_CURVATURE_RADII)]


def design_tapers(**kw):
    return [TubeSpec("tapered", 2.5, diameter_gradient=t, name=f"taper_{t}", **kw)
            for t, _ in DESIGN_TAPERS]


BUNDLED = {
    "diameters": design_diameters,
    "curvatures": design_curvatures,
    "tapers": design_tapers,
}


def specs_from_dict(doc: dict):
    """Phantom description as parsed from a JSON spec file."""
    tubes = doc.get("tubes")
    if not tubes:
        raise PhantomError("phantom spec lists no tubes")
    specs = []
    for t in tubes:
        t = dict(t)
        for key in ("start", "direction", "bend_normal", "attenuation", "branch_angles"):
            if key in t and t[key] is not None:
                t[key] = tuple(t[key])
        try:
            specs.append(TubeSpec(**t))
        except TypeError as exc:
            raise PhantomError(f"bad tube entry: {exc}") from None
    grid = None
    if "grid" in doc:
        g = doc["grid"]
        grid = Grid(tuple(g["dims"]), tuple(g.get("spacing", DEFAULT_SPACING)),
                    tuple(g.get("origin", (0.0, 0.0, 0.0))))
    return specs, grid
