import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from airtaper.cli import EXIT_ALL_FAILED, EXIT_CONFIG, EXIT_OK, main
from airtaper.taper import diameter_gradient

SPEC = {"tubes": [{"family": "straight", "lumen_diameter_start": 3.9, "length": 24, "name": "flat"},
                  {"family": "tapered", "lumen_diameter_start": 2.5, "diameter_gradient": 0.109,
                   "length": 30, "name": "cone"}]}

TOML_SPEC = """
[[tubes]]
family = "curved"
lumen_diameter_start = 2.5
curvature_radius = 20.0
length = 25.0
name = "bend"
"""


def read_sections(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SPEC))
    assert main(["phantom", str(spec), "--out", str(root / "ph")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def analyzed(phantom_dir):
    ph = phantom_dir / "ph"
    out = phantom_dir / "res"
    code = main(["analyze", "--ct", str(ph / "ct.nrrd"), "--seg", str(ph / "seg.nrrd"),
                 "--distal", str(ph / "distal.csv"), "--starts", str(ph / "starts.csv"),
                 "--plane-extent", "24", "--dump-samples", "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_phantom_outputs(phantom_dir):
    ph = phantom_dir / "ph"
    for name in ("ct.nrrd", "seg.nrrd", "ground_truth.json", "distal.csv", "starts.csv"):
        assert (ph / name).is_file()
    truth = json.loads((ph / "ground_truth.json").read_text())
    assert [t["tube_id"] for t in truth["tubes"]] == ["flat", "cone"]


def test_straight_tube_slope(analyzed):
    doc = json.loads((analyzed / "taper_flat.json").read_text())
    assert abs(doc["slope"]) < 0.005
    assert doc["n_valid"] == doc["n_sections"]


def test_tapered_tube_gradient(analyzed):
    rows = [r for r in read_sections(analyzed / "sections_cone.csv") if r["valid"] == "1"]
    g = diameter_gradient([float(r["diam_equiv_mm"]) for r in rows],
                          [float(r["arclen_mm"]) for r in rows])
    assert g == pytest.approx(0.109, rel=0.10)


def test_run_record(analyzed):
    run = json.loads((analyzed / "run.json").read_text())
    assert all(a["ok"] for a in run["airways"].values())
    assert "n_jobs" not in run["params"]
    hashes = {json.loads(p.read_text())["config_hash"] for p in analyzed.glob("taper_*.json")}
    assert hashes == {run["config_hash"]}
    header = (analyzed / "samples.csv").read_text().splitlines()[0]
    assert header.startswith("airway_id,param_mm")


def test_svgs_are_well_formed(analyzed):
    for p in analyzed.glob("*.svg"):
        root = ET.fromstring(p.read_text())
        assert root.tag.endswith("svg")


def test_analyze_is_repeatable(phantom_dir, analyzed, tmp_path):
    ph = phantom_dir / "ph"
    assert main(["analyze", "--ct", str(ph / "ct.nrrd"), "--seg", str(ph / "seg.nrrd"),
                 "--distal", str(ph / "distal.csv"), "--starts", str(ph / "starts.csv"),
                 "--plane-extent", "24", "--jobs", "2", "--dump-samples", "--out", str(tmp_path)]) == 0
    for p in analyzed.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_toml_spec_and_metaimage(tmp_path, monkeypatch):
    spec = tmp_path / "bend.toml"
    spec.write_text(TOML_SPEC)
    monkeypatch.setenv("AIRTAPER_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["phantom", str(spec), "--format", "metaimage", "--compress"]) == EXIT_OK
    ph = tmp_path / "env_out"
    assert (ph / "ct.mha").is_file()
    code = main(["analyze", "--ct", str(ph / "ct.mha"), "--seg", str(ph / "seg.mha"),
                 "--distal", str(ph / "distal.csv"), "--starts", str(ph / "starts.csv"),
                 "--plane-extent", "20", "--out", str(tmp_path / "res")])
    assert code == EXIT_OK
    rows = [r for r in read_sections(tmp_path / "res" / "sections_bend.csv") if r["valid"] == "1"]
    d = np.array([float(r["diam_equiv_mm"]) for r in rows])
    assert abs(np.median(d) - 2.5) <= 0.3


def test_config_errors(tmp_path, phantom_dir, capsys):
    ph = phantom_dir / "ph"
    base = ["analyze", "--ct", str(ph / "ct.nrrd"), "--seg", str(ph / "seg.nrrd"), "--out", str(tmp_path)]
    assert main(base + ["--distal", str(tmp_path / "missing.csv")]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("airway_id,x_voxel,y_voxel,z_voxel\nx,0,0,0\n")
    assert main(base + ["--distal", str(bad)]) == EXIT_CONFIG
    empty = tmp_path / "empty.json"
    empty.write_text('{"tubes": []}')
    assert main(["phantom", str(empty), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["phantom", "no-such-design", "--out", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(base + ["--distal", str(bad), "--pixel-size", "-1"])


def test_all_airways_failed(tmp_path, phantom_dir):
    ph = phantom_dir / "ph"
    starts = (ph / "starts.csv").read_text()
    same = tmp_path / "same.csv"
    same.write_text(starts)
    code = main(["analyze", "--ct", str(ph / "ct.nrrd"), "--seg", str(ph / "seg.nrrd"),
                 "--distal", str(same), "--starts", str(ph / "starts.csv"), "--out", str(tmp_path / "o")])
    assert code == EXIT_ALL_FAILED
    run = json.loads((tmp_path / "o" / "run.json").read_text())
    assert not any(a["ok"] for a in run["airways"].values())


# --------------------------------------------------------------------------
# compare

def write_group(path, slopes, see=None, config_hash="h1"):
    path.mkdir()
    for i, s in enumerate(slopes):
        doc = {"airway_id": f"a{i}", "slope": s, "see": 0.01 * (i + 1) if see is None else see[i],
               "config_hash": config_hash}
        (path / f"taper_a{i}.json").write_text(json.dumps(doc))
    return str(path)


def test_compare_separated_groups(tmp_path):
    a = write_group(tmp_path / "a", [1.0, 2.0, 3.0])
    b = write_group(tmp_path / "b", [4.0, 5.0, 6.0])
    assert main(["compare", a, b, "--out", str(tmp_path / "o")]) == EXIT_OK
    doc = json.loads((tmp_path / "o" / "compare.json").read_text())
    assert doc["rank_sum_slope"]["p_two_sided"] == pytest.approx(0.1)
    assert doc["group_a"]["median"] == 2.0 and doc["group_b"]["n"] == 3
    ET.fromstring((tmp_path / "o" / "boxplot.svg").read_text())


def test_compare_identical_groups(tmp_path):
    a = write_group(tmp_path / "a", [0.01, 0.02, 0.03])
    b = write_group(tmp_path / "b", [0.01, 0.02, 0.03])
    assert main(["compare", a, b, "--out", str(tmp_path / "o")]) == EXIT_OK
    doc = json.loads((tmp_path / "o" / "compare.json").read_text())
    assert doc["rank_sum_slope"]["p_two_sided"] == pytest.approx(1.0)


def test_compare_paired(tmp_path):
    sa = [0.010, 0.022, 0.031, 0.045]
    sb = [0.012, 0.020, 0.030, 0.049]
    a = write_group(tmp_path / "a", sa)
    b = write_group(tmp_path / "b", sb)
    out = tmp_path / "o"
    assert main(["compare", a, b, "--paired", "--label-a", "one", "--label-b", "two",
                 "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "compare.json").read_text())
    p = doc["paired"]
    assert p["bland_altman_slope"]["mean_diff"] == pytest.approx(np.mean(np.subtract(sa, sb)), abs=1e-12)
    assert p["max_abs_slope_diff"] == pytest.approx(0.004)
    assert p["pearson_r_slope"] == pytest.approx(np.corrcoef(sa, sb)[0, 1], abs=1e-12)
    assert doc["group_a"]["label"] == "one"
    first = (out / "bland_altman.svg").read_bytes()
    ET.fromstring(first)
    assert main(["compare", a, b, "--paired", "--label-a", "one", "--label-b", "two",
                 "--out", str(out)]) == EXIT_OK
    assert (out / "bland_altman.svg").read_bytes() == first


def test_compare_refuses_bad_input(tmp_path):
    a = write_group(tmp_path / "a", [1.0, 2.0])
    b = write_group(tmp_path / "b", [3.0, 4.0], config_hash="h2")
    (tmp_path / "e").mkdir()
    assert main(["compare", a, b, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["compare", a, str(tmp_path / "e"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["compare", a, str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
