"""Command line driver: ``airtaper analyze | phantom | compare``."""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import plotting
from .centreline import write_samples_csv
from .cross_section import write_sections_csv
from .phantom import BUNDLED, PhantomError, generate_phantom, specs_from_dict
from .pipeline import AirwayAnalyzer, InputError, read_points_csv, write_points_csv
from .stats import StatsError, bland_altman, pearson_r, wilcoxon_rank_sum
from .taper import TaperError, read_flag_ranges, taper_json
from .volume import VolumeError, load_volume, write_volume

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("airtaper")

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED = 0, 2, 3
OUTPUT_ENV = "AIRTAPER_OUTPUT_DIR"


class ConfigError(Exception):
    pass


def _out_dir(args):
    out = args.out or os.environ.get(OUTPUT_ENV) or "airtaper_out"
    os.makedirs(out, exist_ok=True)
    return out


def _require_file(path, what):
    if path is None or not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")


def _positive(kind):
    def parse(s):
        v = kind(s)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    return parse


def _write_text(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _dump_json(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# analyze

def cmd_analyze(args) -> int:
    for path, what in ((args.ct, "CT volume"), (args.seg, "segmentation"),
                       (args.distal, "distal-point file")):
        _require_file(path, what)
    if args.starts:
        _require_file(args.starts, "start-point file")
    if args.flags:
        _require_file(args.flags, "bifurcation-flag file")
    try:
        ct = load_volume(args.ct)
        seg = load_volume(args.seg)
        distal = read_points_csv(args.distal)
        starts = read_points_csv(args.starts) if args.starts else None
        flags = read_flag_ranges(args.flags) if args.flags else None
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    est = AirwayAnalyzer(
        pixel_size=args.pixel_size, plane_extent=args.plane_extent, sample_step=args.sample_step,
        n_rays=args.n_rays, samples_per_pixel=args.samples_per_pixel,
        diameter_offset_mm=args.diameter_offset_mm, interpolation=args.interpolation,
        exclude_bifurcations=args.exclude_bifurcations, auto_bifurcation=args.auto_bifurcation,
        truncate_at_carina=not args.no_carina_truncation, n_jobs=args.jobs)
    try:
        est.fit(ct, seg, distal, starts=starts, flag_ranges=flags)
    except (InputError, VolumeError, TaperError) as exc:
        raise ConfigError(str(exc)) from None

    out = _out_dir(args)
    status = {}
    for k in sorted(est.airways_):
        res = est.airways_[k]
        if res.sections:
            write_sections_csv(os.path.join(out, f"sections_{k}.csv"), k, res.sections)
        fit = est.taper(k) if res.ok else None
        if fit is None:
            err = res.error or "no fit without bifurcation sections"
            status[k] = {"ok": False, "error": err}
            logger.warning("airway %s: %s", k, err)
            continue
        extra = {"exclude_bifurcations": bool(args.exclude_bifurcations),
                 "n_sections": len(res.sections),
                 "n_valid": int(res.profile.valid.sum())}
        _write_text(os.path.join(out, f"taper_{k}.json"),
                    taper_json(k, fit, est.config_hash_, **extra))
        _write_text(os.path.join(out, f"profile_{k}.svg"),
                    plotting.profile_svg(k, res.profile, fit))
        status[k] = {"ok": True, "slope": fit.slope}
    if args.dump_samples:
        write_samples_csv(os.path.join(out, "samples.csv"),
                          [(k, est.airways_[k].samples) for k in sorted(est.airways_)])
    params = {k: v for k, v in est.get_params().items() if k != "n_jobs"}
    _write_text(os.path.join(out, "run.json"),
                _dump_json({"config_hash": est.config_hash_, "params": params, "airways": status}))
    n_ok = sum(s["ok"] for s in status.values())
    print(f"{n_ok}/{len(status)} airways measured; results in {out}")
    return EXIT_OK if n_ok else EXIT_ALL_FAILED


# --------------------------------------------------------------------------
# phantom

def _load_phantom_spec(name):
    if name in BUNDLED:
        return BUNDLED[name](), None
    _require_file(name, "phantom spec")
    try:
        if name.lower().endswith(".toml"):
            with open(name, "rb") as fh:
                doc = tomllib.load(fh)
        else:
            with open(name) as fh:
                doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read phantom spec {name}: {exc}") from None
    return specs_from_dict(doc)


def cmd_phantom(args) -> int:
    try:
        specs, grid = _load_phantom_spec(args.spec)
        ct, seg, truth = generate_phantom(specs, grid, supersample=args.supersample,
                                          blur_sigma_mm=args.blur_sigma_mm)
    except (PhantomError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    ext = ".nrrd" if args.format == "nrrd" else ".mha"
    write_volume(ct, os.path.join(out, "ct" + ext), compress=args.compress)
    write_volume(seg, os.path.join(out, "seg" + ext), compress=args.compress)
    _write_text(os.path.join(out, "ground_truth.json"), truth.to_json() + "\n")
    distal, starts = {}, {}
    for t in truth.tubes:
        distal[t["tube_id"]] = tuple(t["end_voxel"])
        starts[t["tube_id"]] = tuple(t["start_voxel"])
        if "sibling_voxel" in t:
            sib = t["tube_id"] + "_sibling"
            distal[sib] = tuple(t["sibling_voxel"])
            starts[sib] = tuple(t["start_voxel"])
    write_points_csv(os.path.join(out, "distal.csv"), distal)
    write_points_csv(os.path.join(out, "starts.csv"), starts)
    print(f"{len(truth.tubes)} tubes on a {'x'.join(map(str, ct.dims))} grid; written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare

def _read_group(path):
    if not os.path.isdir(path):
        raise ConfigError(f"results directory not found: {path}")
    docs = {}
    for f in sorted(glob.glob(os.path.join(path, "taper_*.json"))):
        with open(f) as fh:
            d = json.load(fh)
        docs[str(d["airway_id"])] = d
    if not docs:
        raise ConfigError(f"no taper results in {path}")
    return docs


def _summary(label, values):
    v = np.asarray(values, dtype=float)
    return {"label": label, "n": int(v.size), "median": float(np.median(v)),
            "mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "min": float(v.min()), "max": float(v.max())}


def _rank_sum_doc(r):
    return {"u_statistic": r.u_statistic, "p_two_sided": r.p_two_sided, "method": r.method}


def cmd_compare(args) -> int:
    a, b = _read_group(args.group_a), _read_group(args.group_b)
    hashes = sorted({d.get("config_hash") for d in list(a.values()) + list(b.values())},
                    key=str)
    if len(hashes) != 1 or hashes[0] is None:
        raise ConfigError(f"results come from different configurations: {hashes}")
    label_a = args.label_a or os.path.basename(os.path.normpath(args.group_a))
    label_b = args.label_b or os.path.basename(os.path.normpath(args.group_b))
    if label_a == label_b:
        label_b += " (b)"
    sa = [a[k]["slope"] for k in sorted(a)]
    sb = [b[k]["slope"] for k in sorted(b)]
    report = {
        "config_hash": hashes[0],
        "group_a": _summary(label_a, sa),
        "group_b": _summary(label_b, sb),
        "rank_sum_slope": _rank_sum_doc(wilcoxon_rank_sum(sa, sb)),
    }
    out = _out_dir(args)
    if args.paired:
        common = sorted(set(a) & set(b))
        if len(common) < 2:
            raise ConfigError("paired comparison needs at least two airways present in both groups")
        pa = [a[k]["slope"] for k in common]
        pb = [b[k]["slope"] for k in common]
        try:
            ba = bland_altman(pa, pb)
            try:
                r = pearson_r(pa, pb)
            except StatsError:
                r = None
        except StatsError as exc:
            raise ConfigError(str(exc)) from None
        report["paired"] = {
            "airway_ids": common,
            "bland_altman_slope": {"mean_diff": ba.mean_diff, "sd_diff": ba.sd_diff,
                                   "limits": list(ba.limits)},
            "pearson_r_slope": r,
            "max_abs_slope_diff": float(np.max(np.abs(np.subtract(pa, pb)))),
            "rank_sum_see": _rank_sum_doc(wilcoxon_rank_sum([a[k]["see"] for k in common],
                                                            [b[k]["see"] for k in common])),
        }
        _write_text(os.path.join(out, "bland_altman.svg"),
                    plotting.bland_altman_svg(pa, pb, ba, title=f"{label_a} vs {label_b}"))
    _write_text(os.path.join(out, "compare.json"), _dump_json(report))
    _write_text(os.path.join(out, "boxplot.svg"), plotting.box_svg({label_a: sa, label_b: sb}))
    print(f"rank-sum p = {report['rank_sum_slope']['p_two_sided']:.4g}; results in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="airtaper", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = p.add_subparsers(dest="command", required=True)

    out_help = f"output directory (default: ${OUTPUT_ENV} or ./airtaper_out)"

    a = sub.add_parser("analyze", help="measure taper rates of marked airways")
    a.add_argument("--ct", required=True, help="CT volume (.nrrd, .nhdr, .mhd, .mha)")
    a.add_argument("--seg", required=True, help="binary airway segmentation on the same grid")
    a.add_argument("--distal", required=True, help="CSV: airway_id,x_voxel,y_voxel,z_voxel")
    a.add_argument("--starts", help="optional CSV of per-airway start voxels, same columns")
    a.add_argument("--flags", help="CSV: airway_id,start_idx,end_idx bifurcation ranges")
    a.add_argument("--pixel-size", type=_positive(float), default=0.3)
    a.add_argument("--plane-extent", type=_positive(float), default=40.0)
    a.add_argument("--sample-step", type=_positive(float), default=0.25)
    a.add_argument("--n-rays", type=_positive(int), default=50)
    a.add_argument("--samples-per-pixel", type=_positive(int), default=5)
    a.add_argument("--diameter-offset-mm", type=float, default=0.0)
    a.add_argument("--interpolation", choices=("tricubic", "trilinear"), default="tricubic")
    a.add_argument("--exclude-bifurcations", action="store_true",
                   help="report the fit without flagged sections")
    a.add_argument("--auto-bifurcation", action="store_true",
                   help="flag sections near skeleton branch points when --flags is absent")
    a.add_argument("--no-carina-truncation", action="store_true",
                   help="measure from the start point instead of from the carina")
    a.add_argument("--jobs", type=_positive(int), default=1)
    a.add_argument("--dump-samples", action="store_true", help="also write samples.csv")
    a.add_argument("--out", help=out_help)
    a.set_defaults(func=cmd_analyze)

    ph = sub.add_parser("phantom", help="rasterise a synthetic tube phantom")
    ph.add_argument("spec", help=f"bundled name ({', '.join(sorted(BUNDLED))}) "
                                 "or a JSON/TOML spec file")
    ph.add_argument("--format", choices=("nrrd", "metaimage"), default="nrrd")
    ph.add_argument("--compress", action="store_true", help="gzip/zlib the payload")
    ph.add_argument("--supersample", type=_positive(int), default=3)
    ph.add_argument("--blur-sigma-mm", type=float, default=0.0)
    ph.add_argument("--out", help=out_help)
    ph.set_defaults(func=cmd_phantom)

    c = sub.add_parser("compare", help="compare taper rates of two result directories")
    c.add_argument("group_a")
    c.add_argument("group_b")
    c.add_argument("--paired", action="store_true",
                   help="match airways by id and add agreement statistics")
    c.add_argument("--label-a")
    c.add_argument("--label-b")
    c.add_argument("--out", help=out_help)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"airtaper: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
