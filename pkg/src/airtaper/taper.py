"""Taper rate: slope of log cross-sectional area against arc length."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

AUTO_FLAG_DIAMETERS = 1.0


class TaperError(ValueError):
    pass


@dataclass(frozen=True)
class AirwayProfile:
    arc_length: np.ndarray
    area: np.ndarray
    bifurcation: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.arc_length, self.area, self.bifurcation, self.valid)]
        if len({len(a) for a in arrays}) != 1:
            raise TaperError("profile columns differ in length")
        arc, area, bif, valid = arrays
        if np.any(np.diff(arc) <= 0):
            raise TaperError("arc lengths must be strictly increasing")
        valid = valid.astype(bool)
        if np.any(~(area[valid] > 0)):
            raise TaperError("valid entries must have positive area")
        object.__setattr__(self, "arc_length", arc.astype(float))
        object.__setattr__(self, "area", area.astype(float))
        object.__setattr__(self, "bifurcation", bif.astype(bool))
        object.__setattr__(self, "valid", valid)

    def __len__(self):
        return len(self.arc_length)

    def usable(self, exclude_bifurcations: bool = False):
        mask = self.valid.copy()
        if exclude_bifurcations:
            mask &= ~self.bifurcation
        return mask


@dataclass(frozen=True)
class TaperResult:
    slope: float
    intercept: float
    see: float
    n_used: int
    excluded_bifurcation: int
    r2: float

    def as_dict(self):
        return asdict(self)


def _ols(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise TaperError("arc lengths have zero variance")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    return float(slope), float(intercept), resid


def build_profile(sections, ranges=None, branch_points=None) -> AirwayProfile:
    """Collect (arc length, area, flags) from measured sections.

    Bifurcation flags come from inclusive section-index ``ranges`` when
    given; otherwise, if skeleton ``branch_points`` (world mm) are supplied,
    a section is flagged when its centre lies within one equivalent diameter
    of any of them.
    """
    sections = list(sections)
    n = len(sections)
    arc = np.array([s.arc_length for s in sections], dtype=float)
    area = np.array([s.area for s in sections], dtype=float)
    valid = np.array([bool(s.valid) for s in sections], dtype=bool)
    flags = np.zeros(n, dtype=bool)
    if ranges is not None:
        for lo, hi in ranges:
            if not (0 <= lo <= hi < n):
                raise TaperError(f"flag range [{lo}, {hi}] does not fit {n} sections")
            flags[lo:hi + 1] = True
    elif branch_points is not None and len(branch_points) and n:
        bps = np.asarray(branch_points, dtype=float).reshape(-1, 3)
        diam = np.array([s.diameter for s in sections], dtype=float)
        ok = valid & np.isfinite(diam)
        fallback = float(np.median(diam[ok])) if ok.any() else 0.0
        diam = np.where(ok, diam, fallback)
        centres = np.array([s.centre for s in sections], dtype=float)
        dist = np.linalg.norm(centres[:, None, :] - bps[None, :, :], axis=2).min(axis=1)
        flags = dist <= AUTO_FLAG_DIAMETERS * diam
    for s, f in zip(sections, flags):
        s.bifurcation = bool(f)
    return AirwayProfile(arc, np.where(valid, area, np.nan), flags, valid)


def taper_rate(p: AirwayProfile, exclude_bifurcations: bool = False) -> TaperResult:
    """Ordinary least squares of natural-log area on arc length."""
    use = p.usable(exclude_bifurcations)
    n = int(use.sum())
    if n < 3:
        raise TaperError(f"need at least 3 usable sections, have {n}")
    x = p.arc_length[use]
    y = np.log(p.area[use])
    slope, intercept, resid = _ols(x, y)
    ssr = float(np.sum(resid ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    excluded = int((p.valid & p.bifurcation).sum()) if exclude_bifurcations else 0
    return TaperResult(
        slope=slope, intercept=intercept, see=math.sqrt(ssr / (n - 2)), n_used=n,
        excluded_bifurcation=excluded, r2=1.0 - ssr / sst if sst > 0 else 1.0)


def diameter_gradient(diameters, arc_lengths) -> float:
    """Least-squares slope of diameter against arc length (mm per mm)."""
    d = np.asarray(diameters, dtype=float)
    z = np.asarray(arc_lengths, dtype=float)
    if d.shape != z.shape:
        raise TaperError("diameters and arc lengths differ in length")
    if d.size < 3:
        raise TaperError("need at least 3 measurements")
    if np.any(np.diff(z) <= 0):
        raise TaperError("arc lengths must be strictly increasing")
    return _ols(z, d)[0]


class TaperRegressor(RegressorMixin, BaseEstimator):
    """Exponential area model ``area = exp(intercept + slope * arc_length)``.

    Parameters
    ----------
    exclude_bifurcations : bool, default=False
        Drop samples flagged as bifurcating before fitting.

    Attributes
    ----------
    slope_ : float
        Taper rate (per mm).
    intercept_ : float
        Log-area at zero arc length.
    see_ : float
        Standard error of estimate of the log-linear fit.
    r2_ : float
    n_used_ : int
    """

    def __init__(self, exclude_bifurcations=False):
        self.exclude_bifurcations = exclude_bifurcations

    def fit(self, X, y, bifurcation=None):
        X, y = check_X_y(X, y, ensure_min_samples=3, y_numeric=True)
        if X.shape[1] != 1:
            raise ValueError("X must hold a single arc-length column")
        if np.any(y <= 0):
            raise ValueError("areas must be positive")
        flags = np.zeros(len(y), dtype=bool) if bifurcation is None else np.asarray(bifurcation, bool)
        order = np.argsort(X[:, 0], kind="stable")
        profile = AirwayProfile(X[order, 0], y[order], flags[order], np.ones(len(y), dtype=bool))
        res = taper_rate(profile, self.exclude_bifurcations)
        self.slope_ = res.slope
        self.intercept_ = res.intercept
        self.coef_ = np.array([res.slope])
        self.see_ = res.see
        self.r2_ = res.r2
        self.n_used_ = res.n_used
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "slope_")
        X = check_array(X)
        return np.exp(self.intercept_ + self.slope_ * X[:, 0])

    def predict_log(self, X):
        check_is_fitted(self, "slope_")
        X = check_array(X)
        return self.intercept_ + self.slope_ * X[:, 0]


def read_flag_ranges(path) -> dict:
    """``airway_id,start_idx,end_idx`` rows grouped by airway."""
    out = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out[row["airway_id"].strip()].append((int(row["start_idx"]), int(row["end_idx"])))
            except (KeyError, ValueError) as exc:
                raise TaperError(f"{path}: bad flag row {row} ({exc})") from None
    return dict(out)


def taper_json(airway_id, result: TaperResult, config_hash: str, **extra) -> str:
    doc = {"airway_id": airway_id, "slope": result.slope, "intercept": result.intercept,
           "see": result.see, "r2": result.r2, "n_used": result.n_used,
           "excluded_bifurcation": result.excluded_bifurcation, "config_hash": config_hash,
           "log_base": "e"}
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
