"""End-to-end airway taper measurement as a scikit-learn style estimator."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .centreline import fit_spline, recentre, sample_curve
from .cross_section import MeasureConfig, measure_airway
from .skeleton import STRUCT26, extract_paths, find_trachea_start, thin_to_skeleton
from .taper import AirwayProfile, TaperResult, build_profile, taper_rate
from .volume import Volume, VolumeError, distance_transform

logger = logging.getLogger(__name__)

# parameters that change what gets measured; the rest only affect reporting
_HASHED_PARAMS = ("pixel_size", "plane_extent", "sample_step", "n_rays", "samples_per_pixel",
                  "diameter_offset_mm", "interpolation", "auto_bifurcation",
                  "truncate_at_carina")


class InputError(ValueError):
    """Inputs that do not fit together (grids, distal points, flags)."""


@dataclass
class AirwayResult:
    airway_id: str
    path: object = None
    samples: list = field(default_factory=list)
    sections: list = field(default_factory=list)
    profile: AirwayProfile | None = None
    taper_all: TaperResult | None = None
    taper_excluding: TaperResult | None = None
    branch_points: np.ndarray | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and self.taper_all is not None


def read_points_csv(path) -> dict:
    """``airway_id,x_voxel,y_voxel,z_voxel`` rows as ``{id: (x, y, z)}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out[row["airway_id"].strip()] = tuple(
                    int(row[k]) for k in ("x_voxel", "y_voxel", "z_voxel"))
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path}: bad point row {row} ({exc})") from None
    if not out:
        raise InputError(f"{path}: no points")
    return out


def write_points_csv(path, points: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["airway_id", "x_voxel", "y_voxel", "z_voxel"])
        for k in sorted(points):
            w.writerow([k, *points[k]])


class AirwayAnalyzer(BaseEstimator):
    """Measure the taper rate of every airway marked by a distal point.

    Parameters
    ----------
    pixel_size, plane_extent : float
        Resolution and width (mm) of the perpendicular planes.
    sample_step : float
        Spacing (mm of spline parameter) between cross-sections.
    n_rays, samples_per_pixel : int
        Ray casting density for the lumen edge search.
    diameter_offset_mm : float
        Calibration constant added to every equivalent diameter.
    interpolation : str
        Plane resampling kernel.
    exclude_bifurcations : bool
        Which taper fit is reported as ``taper_``.
    auto_bifurcation : bool
        Flag sections near skeleton branch points when no ranges are given.
    truncate_at_carina : bool
        Start each airway at the carina rather than at the trachea start.
    n_jobs : int
        Airways measured concurrently.
    """

    def __init__(self, pixel_size=0.3, plane_extent=40.0, sample_step=0.25, n_rays=50,
                 samples_per_pixel=5, diameter_offset_mm=0.0, interpolation="tricubic",
                 exclude_bifurcations=False, auto_bifurcation=False, truncate_at_carina=True,
                 n_jobs=1):
        self.pixel_size = pixel_size
        self.plane_extent = plane_extent
        self.sample_step = sample_step
        self.n_rays = n_rays
        self.samples_per_pixel = samples_per_pixel
        self.diameter_offset_mm = diameter_offset_mm
        self.interpolation = interpolation
        self.exclude_bifurcations = exclude_bifurcations
        self.auto_bifurcation = auto_bifurcation
        self.truncate_at_carina = truncate_at_carina
        self.n_jobs = n_jobs

    def config_hash(self) -> str:
        params = self.get_params()
        doc = json.dumps({k: params[k] for k in _HASHED_PARAMS}, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def _measure_config(self):
        for name in ("pixel_size", "plane_extent", "sample_step", "n_rays", "samples_per_pixel"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        return MeasureConfig(pixel_size=self.pixel_size, extent=self.plane_extent,
                             n_rays=int(self.n_rays), samples_per_pixel=int(self.samples_per_pixel),
                             interpolation=self.interpolation,
                             diameter_offset_mm=self.diameter_offset_mm)

    def fit(self, ct: Volume, seg: Volume, distal_points: dict, starts: dict | None = None,
            flag_ranges: dict | None = None):
        """Run the pipeline; results land in ``airways_`` keyed by airway id."""
        config = self._measure_config()
        if ct.dims != seg.dims or not np.allclose(ct.spacing, seg.spacing) \
                or not np.allclose(ct.origin, seg.origin):
            raise InputError("CT and segmentation are not on the same grid")
        if seg.kind != "binary":
            raise InputError("segmentation volume must be binary")
        mask = np.asarray(seg.data, dtype=bool)
        distal = {str(k): tuple(int(c) for c in v) for k, v in distal_points.items()}
        starts = {str(k): tuple(int(c) for c in v) for k, v in (starts or {}).items()}
        for name, pts in (("distal point", distal), ("start point", starts)):
            for k, p in pts.items():
                if not seg.contains_index(p) or not mask[p]:
                    raise InputError(f"{name} of airway {k} at {p} is not in the segmentation")
        flag_ranges = flag_ranges or {}
        unknown = set(flag_ranges) - set(distal)
        if unknown:
            raise InputError(f"flag ranges name unknown airways: {sorted(unknown)}")

        labels, _ = ndi.label(mask, structure=STRUCT26)
        results = {k: AirwayResult(k) for k in sorted(distal)}
        by_comp = {}
        for k in sorted(distal):
            by_comp.setdefault(int(labels[distal[k]]), []).append(k)

        for comp, ids in sorted(by_comp.items()):
            comp_mask = labels == comp
            try:
                comp_starts = {k: starts[k] for k in ids if k in starts}
                if len(comp_starts) < len(ids):
                    d = distance_transform(Volume(comp_mask.astype(np.uint8), seg.spacing,
                                                  seg.origin, kind="binary"))
                    auto = find_trachea_start(d)
                    for k in ids:
                        comp_starts.setdefault(k, auto)
                anchors = sorted(set(comp_starts.values()) | {distal[k] for k in ids})
                comp_seg = Volume(comp_mask.astype(np.uint8), seg.spacing, seg.origin, kind="binary")
                tree = thin_to_skeleton(comp_seg, anchors)
                bps = seg.index_to_world(np.array(sorted(tree.branch_points), dtype=float)) \
                    if tree.branch_points else np.zeros((0, 3))
                for start in sorted(set(comp_starts.values())):
                    group = [k for k in ids if comp_starts[k] == start]
                    paths = extract_paths(tree, start, [distal[k] for k in group],
                                          truncate_at_carina=self.truncate_at_carina)
                    for k, path in zip(group, paths):
                        results[k].path = path
                        results[k].branch_points = bps
            except (ValueError, VolumeError) as exc:
                for k in ids:
                    results[k].error = f"centreline: {exc}"

        def run(k):
            res = results[k]
            if res.error:
                return res
            try:
                self._measure(res, ct, seg, config, flag_ranges.get(k))
            except ValueError as exc:
                res.error = str(exc)
                logger.warning("airway %s failed: %s", k, exc)
            return res

        ids = sorted(results)
        if self.n_jobs == 1:
            for k in ids:
                run(k)
        else:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                list(pool.map(run, ids))
        self.airways_ = results
        self.config_hash_ = self.config_hash()
        return self

    def _measure(self, res: AirwayResult, ct, seg, config, ranges):
        pts = recentre(res.path, seg.spacing, seg.origin)
        curve = fit_spline(pts)
        res.samples = sample_curve(curve, self.sample_step)
        res.sections = measure_airway(ct, seg, res.samples, config)
        bps = res.branch_points if (self.auto_bifurcation and ranges is None) else None
        res.profile = build_profile(res.sections, ranges=ranges, branch_points=bps)
        res.taper_all = taper_rate(res.profile, exclude_bifurcations=False)
        try:
            res.taper_excluding = taper_rate(res.profile, exclude_bifurcations=True)
        except ValueError as exc:
            logger.warning("airway %s: no fit without bifurcations (%s)", res.airway_id, exc)

    def taper(self, airway_id) -> TaperResult | None:
        check_is_fitted(self, "airways_")
        res = self.airways_[airway_id]
        return res.taper_excluding if self.exclude_bifurcations else res.taper_all

    @property
    def taper_(self) -> dict:
        check_is_fitted(self, "airways_")
        return {k: self.taper(k) for k in self.airways_ if self.airways_[k].ok}
