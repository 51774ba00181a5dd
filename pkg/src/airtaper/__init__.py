"""Airway taper measurement from volumetric CT and a synthetic tube phantom generator."""
from .centreline import fit_spline, recentre, sample_curve
from .cross_section import MeasureConfig, fit_ellipse, fwhm_esl, measure_airway, resample_plane
from .phantom import TubeSpec, generate_phantom
from .pipeline import AirwayAnalyzer
from .skeleton import extract_paths, find_trachea_start, thin_to_skeleton
from .stats import bland_altman, pearson_r, wilcoxon_rank_sum
from .taper import AirwayProfile, TaperRegressor, build_profile, taper_rate
from .volume import Volume, distance_transform, load_volume, sample, write_volume

__version__ = "0.1.0"

__all__ = [
    "AirwayAnalyzer", "AirwayProfile", "MeasureConfig", "TaperRegressor", "TubeSpec", "Volume",
    "bland_altman", "build_profile", "distance_transform", "extract_paths", "find_trachea_start",
    "fit_ellipse", "fit_spline", "fwhm_esl", "generate_phantom", "load_volume", "measure_airway",
    "pearson_r", "recentre", "resample_plane", "sample", "sample_curve", "taper_rate",
    "thin_to_skeleton", "wilcoxon_rank_sum", "write_volume",
]
