import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from airtaper.centreline import CentrelineSample
from airtaper.cross_section import (HIT, NO_HALF_MAX, NO_SEG_EDGE, SECTION_COLUMNS,
                                    CrossSectionError, MeasureConfig, PlanePatch, fit_ellipse,
                                    fwhm_esl, measure_airway, measure_section, plane_basis,
                                    ray_edge, resample_plane, write_sections_csv)
from airtaper.phantom import TubeSpec, generate_phantom
from airtaper.pipeline import AirwayAnalyzer
from airtaper.volume import Volume

unit_vectors = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


# --------------------------------------------------------------------------
# plane basis

def test_plane_basis_axis_z():
    v1, v2 = plane_basis((0, 0, 1))
    np.testing.assert_allclose(v1, (0, -1, 0))
    np.testing.assert_allclose(v2, (-1, 0, 0))


def test_plane_basis_axis_x_avoids_collinear_helper():
    v1, v2 = plane_basis((1, 0, 0))
    assert abs(v1[0]) < 1e-12 and abs(v2[0]) < 1e-12


@given(unit_vectors)
def test_plane_basis_orthonormal(t):
    t = np.asarray(t) / np.linalg.norm(t)
    v1, v2 = plane_basis(t)
    for a, b in [(v1, v2), (v1, t), (v2, t)]:
        assert abs(a @ b) < 1e-12
    assert abs(np.linalg.norm(v1) - 1) < 1e-12 and abs(np.linalg.norm(v2) - 1) < 1e-12


@given(unit_vectors)
def test_plane_basis_same_plane_for_reversed_tangent(t):
    a1, a2 = plane_basis(t)
    b1, b2 = plane_basis(-np.asarray(t))
    pa = np.outer(a1, a1) + np.outer(a2, a2)
    pb = np.outer(b1, b1) + np.outer(b2, b2)
    np.testing.assert_allclose(pa, pb, atol=1e-12)


def test_plane_basis_rejects_zero():
    with pytest.raises(CrossSectionError):
        plane_basis((0, 0, 0))


# --------------------------------------------------------------------------
# resampling

def test_constant_volume_gives_constant_patch():
    v = Volume(np.full((30, 30, 30), -400.0))
    p = resample_plane(v, (15, 15, 15), (1, 2, 3), 0.5, 10)
    np.testing.assert_allclose(p.pixels, -400.0)
    assert p.outside_fraction == 0.0


def test_default_patch_is_133_pixels():
    v = Volume(np.zeros((200, 200, 200)), spacing=(0.5, 0.5, 0.5))
    p = resample_plane(v, (50, 50, 50), (0, 0, 1))
    assert p.pixels.shape == (133, 133)


@pytest.mark.parametrize("tangent", [(0, 0, 1), (1, 1, 0), (0.3, -0.5, 0.8)])
def test_ball_section_is_a_disc(tangent):
    sp = 0.25
    n = 61
    g = (np.arange(n) - 30) * sp
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    ball = (np.sqrt(x ** 2 + y ** 2 + z ** 2) <= 5.0).astype(np.uint8)
    v = Volume(ball, spacing=(sp,) * 3, origin=(g[0],) * 3, kind="binary")
    ps = 0.3
    p = resample_plane(v, (0, 0, 0), tangent, ps, 14)
    c = p.centre_index
    r = np.hypot(*np.meshgrid(np.arange(p.pixels.shape[0]) - c,
                              np.arange(p.pixels.shape[1]) - c, indexing="ij")) * ps
    inside = p.pixels >= 0.5
    assert r[inside].max() <= 5 + ps
    assert r[~inside].min() >= 5 - ps


def test_out_of_bounds_fraction():
    v = Volume(np.zeros((10, 10, 10)))
    p = resample_plane(v, (0, 5, 5), (1, 0, 0), 0.5, 20, "trilinear")
    assert 0.5 < p.outside_fraction < 0.9
    with pytest.raises(CrossSectionError):
        resample_plane(v, (5, 5, 5), (1, 0, 0), 1.0, 2.0)


# --------------------------------------------------------------------------
# FWHM edge search

def test_ray_edge_ramp_example():
    idx = np.arange(100)
    rb = (idx < 50).astype(float)
    rc = np.where(idx < 40, -1000.0, np.where(idx <= 60, -1000 + 40 * (idx - 40), -200 - 30 * (idx - 60)))
    status, l = ray_edge(rb, rc)
    assert status == HIT and l == pytest.approx(50.0)


def test_ray_edge_sharp_step_is_midpoint():
    rb = np.r_[np.ones(10), np.zeros(10)]
    rc = np.r_[np.full(10, -1000.0), 0.0, -10.0, np.full(8, -800.0)]
    status, l = ray_edge(rb, rc)
    assert status == HIT and l == pytest.approx(9.5)


def test_ray_edge_failure_codes():
    assert ray_edge(np.ones(20), np.linspace(-1000, 0, 20))[0] == NO_SEG_EDGE
    rb = np.r_[np.ones(5), np.zeros(15)]
    assert ray_edge(rb, np.full(20, -1000.0))[0] == NO_HALF_MAX
    assert ray_edge(rb, np.linspace(0, -1000, 20))[0] == NO_HALF_MAX


def test_ray_edge_ignores_ringing_inside_lumen():
    idx = np.arange(60)
    rc = np.where(idx < 30, -1000.0, np.where(idx < 35, -1000 + 200 * (idx - 30), 0.0))
    rc = rc - 100 * (idx > 40)
    rc[10] = -990.0       # shallow bump well inside the lumen
    rb = (idx < 32).astype(float)
    status, l = ray_edge(rb, rc)
    assert status == HIT and l == pytest.approx(32.5)


def wall_profile(edge, n=120, width=6.0):
    """Lumen at -1000, soft wall peaking at 0 just past ``edge``, then background."""
    x = np.arange(n, dtype=float)
    rise = np.clip((x - edge) / width + 0.5, 0, 1)
    fall = np.clip((x - edge - 15) / width, 0, 1)
    return -1000 + 1000 * rise - 800 * fall


@given(st.floats(20, 60), st.floats(0, 10))
def test_edge_moves_with_wall(edge, delta):
    rb0 = (np.arange(120) < edge).astype(float)
    rb1 = (np.arange(120) < edge + delta).astype(float)
    _, l0 = ray_edge(rb0, wall_profile(edge))
    _, l1 = ray_edge(rb1, wall_profile(edge + delta))
    assert abs((l1 - l0) - delta) <= 1.0


def analytic_patches(radius, wall, ps, extent=12.0, offset=(0.0, 0.0), ss=8):
    n = int(math.floor(extent / ps + 1e-9))
    c = (n - 1) / 2
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    ax = (np.arange(n) - c) * ps
    X = (ax[:, None] + sub[None] * ps)[:, None, :, None] - offset[0]
    Y = (ax[:, None] + sub[None] * ps)[None, :, None, :] - offset[1]
    r = np.hypot(X, Y)
    lum = (r < radius).mean(axis=(2, 3))
    out = (r < radius + wall).mean(axis=(2, 3))
    z = np.zeros(3)
    ct = -800 + 800 * out - 1000 * lum
    return (PlanePatch(z, z, z, ps, extent, (lum >= 0.5).astype(float)),
            PlanePatch(z, z, z, ps, extent, ct))


def test_fwhm_on_analytic_disc():
    b, c = analytic_patches(1.95, 1.7, 0.3)
    pts = fwhm_esl(b, c, 50, 5)
    assert pts.hit_fraction == 1.0
    np.testing.assert_allclose(np.hypot(*pts.points.T), 1.95, atol=0.1)


def test_area_error_shrinks_with_pixel_size(rng):
    for radius in (1.25, 1.95, 2.65):
        errors = []
        for ps in (0.6, 0.3, 0.15):
            e = []
            for _ in range(6):
                b, c = analytic_patches(radius, 1.7, ps, offset=rng.uniform(-0.3, 0.3, 2))
                e.append(abs(fit_ellipse(fwhm_esl(b, c)).area / (np.pi * radius ** 2) - 1))
            errors.append(np.mean(e))
        assert errors[0] > errors[1] > errors[2]


def test_fwhm_centre_outside_lumen():
    b, c = analytic_patches(1.0, 1.7, 0.3, offset=(3.0, 0.0))
    with pytest.raises(CrossSectionError):
        fwhm_esl(b, c)


def test_lumen_larger_than_patch():
    b, c = analytic_patches(10.0, 1.7, 0.3, extent=6.0)
    pts = fwhm_esl(b, c, 20)
    assert set(pts.ray_status) == {NO_SEG_EDGE}


# --------------------------------------------------------------------------
# ellipse fit

def ellipse_points(a, b, rot, centre=(0, 0), n=50):
    th = 2 * np.pi * np.arange(n) / n
    x, y = a * np.cos(th), b * np.sin(th)
    c, s = np.cos(rot), np.sin(rot)
    return np.column_stack([c * x - s * y + centre[0], s * x + c * y + centre[1]])


def test_circle_fit_exact():
    fit = fit_ellipse(ellipse_points(2, 2, 0))
    np.testing.assert_allclose(fit.semi_axes, (2, 2), atol=1e-9)
    assert fit.area == pytest.approx(4 * np.pi)
    assert fit.equivalent_diameter == pytest.approx(4.0)
    assert fit.residual < 1e-9


def test_noisy_ellipse_recovered(rng):
    pts = ellipse_points(3, 1, np.radians(30)) + rng.normal(scale=0.02, size=(50, 2))
    fit = fit_ellipse(pts)
    assert fit.semi_axes[0] == pytest.approx(3, rel=0.01)
    assert fit.semi_axes[1] == pytest.approx(1, rel=0.01)
    assert fit.rotation == pytest.approx(np.radians(30), rel=0.01)


def test_too_few_points():
    with pytest.raises(CrossSectionError):
        fit_ellipse(ellipse_points(2, 1, 0, n=5))
    with pytest.raises(CrossSectionError):
        fit_ellipse(np.column_stack([np.arange(10.0), 2 * np.arange(10.0)]))


@given(st.floats(0.5, 5), st.floats(0.2, 1), st.floats(0, np.pi), st.floats(0, 2 * np.pi),
       st.floats(-20, 20), st.floats(-20, 20))
def test_ellipse_area_invariant_under_rigid_motion(a, ratio, rot, turn, dx, dy):
    pts = ellipse_points(a, a * ratio, rot) + np.random.default_rng(1).normal(scale=0.01 * a, size=(50, 2))
    base = fit_ellipse(pts).area
    c, s = np.cos(turn), np.sin(turn)
    moved = pts @ np.array([[c, s], [-s, c]]) + (dx, dy)
    assert fit_ellipse(moved).area == pytest.approx(base, rel=1e-9)


# --------------------------------------------------------------------------
# whole airway

@pytest.fixture(scope="module")
def tube39():
    ct, seg, truth = generate_phantom([TubeSpec("straight", 3.9, length=20)])
    return ct, seg, truth.tubes[0]


def samples_along(truth, step=1.0, start=3.0, stop=17.0):
    p0 = np.array(truth["centreline_mm"][0])
    return [CentrelineSample(p0 + np.array([0, 0, s]), np.array([0.0, 0, 1]), s - start, s)
            for s in np.arange(start, stop, step)]


def test_straight_tube_diameter(tube39):
    ct, seg, truth = tube39
    secs = measure_airway(ct, seg, samples_along(truth), MeasureConfig(extent=20))
    d = np.array([s.diameter for s in secs])
    assert all(s.valid for s in secs)
    assert np.all(np.abs(d - 3.9) <= 0.3)


def test_offset_is_added_to_diameter(tube39):
    ct, seg, truth = tube39
    smp = samples_along(truth)[:1]
    a = measure_airway(ct, seg, smp, MeasureConfig(extent=20))[0]
    b = measure_airway(ct, seg, smp, MeasureConfig(extent=20, diameter_offset_mm=0.38))[0]
    assert b.diameter == pytest.approx(a.diameter + 0.38)
    assert b.area == pytest.approx(np.pi * b.diameter ** 2 / 4)


def test_threads_do_not_change_results(tube39):
    ct, seg, truth = tube39
    cfg = MeasureConfig(extent=20)
    a = measure_airway(ct, seg, samples_along(truth), cfg)
    b = measure_airway(ct, seg, samples_along(truth), cfg, n_jobs=3)
    assert [s.area for s in a] == [s.area for s in b]


def test_empty_and_failed_sections(tube39):
    ct, seg, truth = tube39
    assert measure_airway(ct, seg, []) == []
    far = CentrelineSample(np.array(truth["centreline_mm"][0]) + (6, 0, 8), np.array([0, 0, 1.0]), 0, 0)
    sec = measure_section(ct, seg, far, 0, MeasureConfig(extent=10))
    assert not sec.valid and sec.reason == "centre_outside_lumen"
    edge = CentrelineSample(np.array(seg.origin), np.array([0, 0, 1.0]), 0, 0)
    sec = measure_section(ct, seg, edge, 0, MeasureConfig(extent=20))
    assert sec.reason == "plane_out_of_bounds"
    with pytest.raises(CrossSectionError):
        measure_airway(ct, seg, [far], MeasureConfig(extent=10))


def test_sections_csv(tmp_path, tube39):
    ct, seg, truth = tube39
    secs = measure_airway(ct, seg, samples_along(truth)[:3], MeasureConfig(extent=20))
    write_sections_csv(tmp_path / "s.csv", "a1", secs)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].split(",") == SECTION_COLUMNS
    assert len(lines) == 4 and lines[1].startswith("a1,0,")


def test_bifurcation_sections_are_larger():
    ct, seg, truth = generate_phantom([TubeSpec("bifurcation", 3.0, length=40, parent_length=20,
                                                branch_angles=(30, 30))])
    t = truth.tubes[0]
    start = tuple(t["start_voxel"])
    est = AirwayAnalyzer(auto_bifurcation=True, truncate_at_carina=False, plane_extent=30)
    est.fit(ct, seg, {"y": tuple(t["end_voxel"]), "s": tuple(t["sibling_voxel"])},
            {"y": start, "s": start})
    p = est.airways_["y"].profile
    flagged = p.area[p.valid & p.bifurcation]
    plain = p.area[p.valid & ~p.bifurcation]
    assert flagged.size and plain.size
    assert flagged.mean() > 1.2 * plain.mean()
