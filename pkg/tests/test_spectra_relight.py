import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spectrascan.datasets import default_basis
from spectrascan.geometry import CAMERA, DeviceView, Intrinsics, Pose
from spectrascan.plyio import read_points
from spectrascan.relight import Light, light_shading, point_radiance, relight, sample_points, splat_image
from spectrascan.spectra import (
    estimate_spectra,
    export_spectra,
    point_visibility,
    prepare_points,
    spectral_rmse,
    zbuffer_visibility,
)
from spectrascan.spectral_model import SpectralCurve

PROPS = settings(max_examples=1000, deadline=None)


def _top_cam(size=200, focal=300.0):
    return DeviceView("top", CAMERA, Intrinsics.centered(focal, size, size), Pose.look_at([0, 0, 3.0], [0, 0, 0], up=(0, 1, 0)))


def _sheet(z, n=40):
    g = np.linspace(-0.5, 0.5, n)
    xx, yy = np.meshgrid(g, g)
    return np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)])


def test_zbuffer_front_sheet_hides_back():
    front, back = _sheet(0.2), _sheet(-0.2)
    P = np.vstack([front, back])
    N = np.tile([0, 0, 1.0], (len(P), 1))
    vis = zbuffer_visibility(_top_cam(), P, N, 1e-3)
    assert vis[: len(front)].all()
    # the back sheet's border pixels fall outside the front sheet's footprint
    assert vis[len(front) :].mean() < 0.15


def test_zbuffer_back_facing_never_visible():
    P = _sheet(0.0)
    assert not zbuffer_visibility(_top_cam(), P, np.tile([0, 0, -1.0], (len(P), 1)), 1e-3).any()


@pytest.fixture(scope="module")
def span_blob():
    """Blob with reflectances inside the default basis span, plus truth points seen by cam0."""
    from spectrascan.synth import build_scene, render_capture

    scene = build_scene("blob", {"reflectance_mode": "basis"})
    cap = render_capture(scene)
    hits = cap.camera_hits("cam0")
    idx = np.random.default_rng(0).choice(np.flatnonzero(hits.valid.ravel()), 400, replace=False)
    P = hits.points.reshape(-1, 3)[idx]
    N = hits.normals.reshape(-1, 3)[idx]
    mat = hits.material.ravel()[idx]
    return scene, cap, P, N, mat


def test_zbuffer_visibility_close_to_mesh(span_blob):
    scene, _, P, N, _ = span_blob
    pairs = [(scene.views[p], scene.views[c]) for p, c in scene.pairs]
    T = np.zeros((len(P), len(pairs)), bool)
    Z = T.copy()
    for k, (a, b) in enumerate(zip(point_visibility(P, N, pairs, mesh=scene.mesh), point_visibility(P, N, pairs))):
        T[k, a] = True
        Z[k, b] = True
    assert (T == Z).mean() > 0.93


def test_estimates_on_truth_points(span_blob):
    scene, cap, P, N, mat = span_blob
    sp = prepare_points(P, scene.views, scene.pairs, normals=N, mesh=scene.mesh)
    imgs = {i: cap.clean_color_images(i) for i in range(len(scene.pairs))}
    estimate_spectra(sp, imgs, default_basis(scene.grid), scene.illum, scene.sens, gamma=0.0)
    assert sp.estimated.mean() > 0.95
    err = spectral_rmse(sp.reflectances[sp.estimated], scene.reflectances[mat[sp.estimated]])
    # off-camera bilinear samples straddling material edges spoil a few points
    assert np.median(err) < 1e-3


def test_excluded_pair_never_used(span_blob):
    scene, _, P, N, _ = span_blob
    sp = prepare_points(P[:50], scene.views, scene.pairs, normals=N[:50], mesh=scene.mesh, exclude_pairs=[0])
    assert all(0 not in v for v in sp.visibility)
    assert all(set(s) == set(v) for s, v in zip(sp.shading, sp.visibility))


def test_export_files(tmp_path, span_blob):
    scene, cap, P, N, _ = span_blob
    sp = prepare_points(P[:30], scene.views, scene.pairs, normals=N[:30], mesh=scene.mesh)
    sp.visibility[0] = []
    sp.shading[0] = {}
    estimate_spectra(sp, {i: cap.clean_color_images(i) for i in range(len(scene.pairs))}, default_basis(scene.grid), scene.illum, scene.sens)
    summary = export_spectra(tmp_path, sp, scene.grid)
    assert summary["n_points"] == 30 and summary["n_unestimated"] >= 1
    rows = list(csv.reader(open(tmp_path / "spectra.csv")))
    assert len(rows) == 31 and len(rows[0]) == 4 + scene.grid.count
    assert rows[1][4] == ""  # unestimated point has blank spectrum
    back = read_points(tmp_path / "spectra.ply")
    np.testing.assert_allclose(back["points"], P[:30], rtol=1e-6)
    assert json.loads((tmp_path / "summary.json").read_text())["n_estimated"] == summary["n_estimated"]


# --- relighting ------------------------------------------------------------------------


def _flat_light(grid, pos, value=1.0, **kw):
    return Light(np.asarray(pos, float), SpectralCurve.constant(grid, value), **kw)


def test_empty_light_list(grid, sens):
    with pytest.raises(ValueError):
        point_radiance(np.zeros((1, 3)), [[0, 0, 1.0]], np.ones((1, grid.count)), [], sens)


def test_light_default_is_point(grid):
    assert not _flat_light(grid, [0, 0, 2]).at_infinity
    with pytest.raises(ValueError):
        _flat_light(grid, [0, 0, 0], at_infinity=True)


def test_point_light_inverse_square(grid):
    P = np.array([[0.0, 0, 0], [0.3, 0, 0]])
    N = np.tile([0, 0, 1.0], (2, 1))
    s = light_shading(_flat_light(grid, [0, 0, 2.0]), P, N, shadows=False)
    assert s[0] == pytest.approx(0.25)
    assert s[1] == pytest.approx(2.0 / (0.09 + 4) ** 1.5)


def test_directional_light_cosine(grid):
    N = np.array([[0, 0, 1.0], [0, 0, -1.0], [1.0, 0, 0]])
    s = light_shading(_flat_light(grid, [0, 1.0, 1.0], at_infinity=True), np.zeros((3, 3)) + [[0, 0, 0], [1, 0, 0], [0, 1, 0]], N, shadows=False)
    np.testing.assert_allclose(s, [np.sqrt(0.5), 0, 0], atol=1e-15)


def test_shadowed_sheet_is_dark(grid):
    front, back = _sheet(0.2, 30), _sheet(-0.2, 30)
    P = np.vstack([front, back])
    N = np.tile([0, 0, 1.0], (len(P), 1))
    s = light_shading(_flat_light(grid, [0, 0, 3.0]), P, N)
    assert np.all(s[: len(front)] > 0)
    assert (s[len(front) :] == 0).mean() > 0.85


def test_two_lights_add(grid, sens, rng):
    P = _sheet(0.0, 20)
    N = np.tile([0, 0, 1.0], (len(P), 1))
    R = rng.uniform(0, 1, (len(P), grid.count))
    a = _flat_light(grid, [0.5, 0, 2.0], 0.7)
    b = Light(np.array([-1.0, 0.3, 1.5]), SpectralCurve(grid, np.linspace(0.2, 1, grid.count)))
    both = point_radiance(P, N, R, [a, b], sens)
    np.testing.assert_allclose(both, point_radiance(P, N, R, [a], sens) + point_radiance(P, N, R, [b], sens), rtol=1e-12)


def test_splat_single_point():
    cam = _top_cam(50, 100.0)
    img, mask = splat_image(cam, np.array([[0.0, 0, 0]]), np.array([[1.0, 2.0, 3.0]]), radius=1)
    assert mask.sum() == 5  # a radius-1 disc
    np.testing.assert_array_equal(img[25, 25], [1, 2, 3])


def test_splat_nearest_wins():
    cam = _top_cam(50, 100.0)
    img, _ = splat_image(cam, np.array([[0.0, 0, -0.5], [0.0, 0, 0.5]]), np.array([1.0, 2.0]), radius=1)
    assert img[25, 25, 0] == 2.0


def test_relight_drops_unestimated(grid, sens):
    P = _sheet(0.0, 20)
    N = np.tile([0, 0, 1.0], (len(P), 1))
    R = np.full((len(P), grid.count), 0.5)
    R[3] = np.nan
    img, mask, rad = relight(P, N, R, [_flat_light(grid, [0, 0, 2.0])], _top_cam(), sens)
    assert np.isnan(rad[3]).all() and np.isfinite(rad[np.arange(len(P)) != 3]).all()
    vals = sample_points(_top_cam(), img, P)
    np.testing.assert_allclose(vals[10], rad[10])


@PROPS
@given(arrays(float, 3, elements=st.floats(-2, 2)), st.floats(0.01, 5), st.floats(0.01, 5))
def test_radiance_linear_in_light_power(pos, c1, c2):
    from spectrascan.datasets import load_camera_sensitivity
    from spectrascan.spectral_model import WavelengthGrid

    g = WavelengthGrid()
    sens = load_camera_sensitivity(g)
    pos = pos + [0, 0, 2.5]
    P = np.array([[0.1, 0.0, 0.0], [0.0, -0.2, 0.05]])
    N = np.array([[0, 0, 1.0], [0, 0.6, 0.8]])
    R = np.full((2, g.count), 0.4)
    a = point_radiance(P, N, R, [_flat_light(g, pos, c1)], sens, shadows=False)
    b = point_radiance(P, N, R, [_flat_light(g, pos, c2)], sens, shadows=False)
    np.testing.assert_allclose(a * c2, b * c1, rtol=1e-12, atol=1e-300)
