import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import least_squares

from spectrascan.errors import BehindCameraError, DegenerateGeometryError
from spectrascan.geometry import (
    CAMERA,
    PROJECTOR,
    DeviceView,
    Intrinsics,
    OrientedPoint,
    Pose,
    RayCaster,
    TriangleMesh,
    estimate_normals,
    in_image,
    project,
    project_points,
    segment_blocked_bruteforce,
    shading_factor,
    shading_factors,
    triangulate,
    visibility_mask,
    visible,
    visible_pair_set,
)
from spectrascan.synth import box_mesh

PROPS = settings(max_examples=1000, deadline=None)


@pytest.fixture
def hd_view():
    return DeviceView("c", CAMERA, Intrinsics(1000, 1000, 960, 540, 1920, 1080), Pose())


def test_project_examples(hd_view):
    assert project(hd_view, (0, 0, 5)) == (960, 540)
    assert project(hd_view, (1, 0, 5)) == (1160, 540)
    with pytest.raises(BehindCameraError):
        project(hd_view, (0, 0, -1))


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]))
    p = Pose.look_at([1, 2, 3], [0, 0, 0])
    R = p.rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(p.center, [1, 2, 3], atol=1e-12)


def _ring(n=4, radius=1.0, height=0.3, focal=800.0):
    out = []
    for k, a in enumerate(np.linspace(-0.6, 0.6, n)):
        c = [radius * np.cos(a), radius * np.sin(a), height]
        out.append(DeviceView(f"v{k}", CAMERA, Intrinsics.centered(focal, 640, 480), Pose.look_at(c, [0, 0, 0])))
    return out


def test_triangulate_exact():
    views = _ring()
    p = np.array([0.03, -0.02, 0.05])
    got = triangulate([(v, project(v, p)) for v in views[:2]])
    np.testing.assert_allclose(got, p, atol=1e-9)


def test_triangulate_duplicated_view():
    v = _ring()[0]
    uv = project(v, (0.0, 0.0, 0.0))
    with pytest.raises(DegenerateGeometryError):
        triangulate([(v, uv), (v, uv)])


def test_triangulate_noise_within_bound():
    views = _ring()
    rng = np.random.default_rng(1)
    p = np.array([0.02, -0.03, 0.05])
    sigma = 0.2
    centers = np.array([v.center for v in views])
    baseline = max(np.linalg.norm(a - b) for a in centers for b in centers)
    Z = np.mean(np.linalg.norm(centers - p, axis=1))
    bound = 3 * sigma * Z**2 / (800.0 * baseline)

    def refine(obs, x0):
        def res(x):
            return np.concatenate([np.array(project(v, x)) - uv for v, uv in obs])

        return least_squares(res, x0, xtol=1e-14, ftol=1e-14).x

    dlt, nl = [], []
    for _ in range(300):
        obs = [(v, np.array(project(v, p)) + rng.normal(0, sigma, 2)) for v in views]
        x = triangulate(obs)
        dlt.append(np.linalg.norm(x - p))
        nl.append(np.linalg.norm(refine(obs, x) - p))
    rms_dlt = np.sqrt(np.mean(np.square(dlt)))
    rms_nl = np.sqrt(np.mean(np.square(nl)))
    assert rms_dlt < bound
    assert rms_dlt <= 1.1 * rms_nl


def test_normals_on_plane():
    rng = np.random.default_rng(2)
    P = np.column_stack([rng.uniform(-1, 1, (500, 2)), np.zeros(500)])
    n = estimate_normals(P, 16, viewpoints=[[0, 0, 3.0]])
    np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (500, 1)), atol=1e-12)


def test_normals_on_sphere():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(10000, 3))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    ring = [[4 * np.cos(a), 4 * np.sin(a), 0.5] for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    n = estimate_normals(P, 12, viewpoints=ring)
    # only points some camera can see: the polar caps face away from every camera
    seen = (P @ np.array(ring).T).max(axis=1) > 1.0
    assert seen.mean() > 0.9
    ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", n[seen], P[seen]), -1, 1)))
    assert ang.mean() < 5.0


def test_normals_collinear_neighbourhood():
    P = np.column_stack([np.arange(3.0), 2 * np.arange(3.0), np.zeros(3)])
    n = estimate_normals(P, 3)
    line = np.array([1.0, 2.0, 0.0]) / np.sqrt(5)
    np.testing.assert_allclose(n @ line, 0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1, atol=1e-12)


def test_normals_argument_errors():
    with pytest.raises(ValueError):
        estimate_normals(np.zeros((5, 3)), 8)
    with pytest.raises(ValueError):
        estimate_normals(np.zeros((5, 3)), 2)


@pytest.mark.parametrize(
    "p_pro,expected",
    [((0, 0, 1), 1.0), ((0, 0, 2), 0.25), ((1, 0, 1), 1 / (2 * np.sqrt(2))), ((0, 0, -1), 0.0), ((1, 0, 0), 0.0)],
)
def test_shading_examples(p_pro, expected):
    assert shading_factor(p_pro, (0, 0, 0), (0, 0, 1)) == pytest.approx(expected, abs=1e-15)


def test_shading_coincident():
    with pytest.raises(ValueError):
        shading_factor((1, 1, 1), (1, 1, 1), (0, 0, 1))


# --- visibility ----------------------------------------------------------------


@pytest.fixture(scope="module")
def cube():
    V, F = box_mesh([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
    return TriangleMesh(V, F)


def _facing(center, target=(0, 0, 0), kind=CAMERA):
    return DeviceView("d", kind, Intrinsics.centered(500.0, 400, 400), Pose.look_at(center, target))


def test_cube_face_visible_from_front(cube):
    pt = OrientedPoint([0.1, 0.2, 0.5], [0, 0, 1])
    assert visible(pt, _facing([0.1, 0.2, 3.0]), cube, 1e-4)


def test_cube_face_hidden_from_behind(cube):
    pt = OrientedPoint([0.1, 0.2, 0.5], [0, 0, 1])
    assert not visible(pt, _facing([0.1, 0.2, -3.0]), cube, 1e-4)


def test_projector_needs_front_facing(cube):
    # a projector exactly in the face plane lights it at grazing incidence only
    pt = OrientedPoint([0.0, 0.0, 0.5], [0, 0, 1])
    assert not visible(pt, _facing([3.0, 0.0, 0.5], kind=PROJECTOR), cube, 1e-4)


def test_visible_requires_positive_eps(cube):
    with pytest.raises(ValueError):
        visible(OrientedPoint([0, 0, 0.5], [0, 0, 1]), _facing([0, 0, 3.0]), cube, 0.0)


def test_pair_set_lifts_examples(cube):
    pt = OrientedPoint([0.1, 0.2, 0.5], [0, 0, 1])
    front_c = _facing([0.1, 0.2, 3.0])
    back_c = _facing([0.1, 0.2, -3.0])
    front_p = _facing([0.5, 0.2, 3.0], kind=PROJECTOR)
    sets = visible_pair_set(pt.position[None], pt.normal[None], [(front_p, front_c), (front_p, back_c)], cube, 1e-4)
    assert sets == [[0]]


def test_visibility_matches_bruteforce(blob_capture):
    scene = blob_capture.scene
    mesh = scene.mesh
    rng = np.random.default_rng(4)
    tri = rng.integers(0, len(mesh.triangles), 1000)
    bary = rng.dirichlet(np.ones(3), 1000)
    P = np.einsum("nk,nki->ni", bary, mesh.corners[tri])
    N = mesh.face_normals[tri]
    views = list(scene.views.values())
    which = rng.integers(0, len(views), 1000)
    eps = 1e-4 * mesh.bbox_diagonal
    caster = RayCaster(mesh)
    for k in range(1000):
        v = views[which[k]]
        got = visibility_mask(P[k : k + 1], N[k : k + 1], v, caster, eps)[0]
        uv, z = project_points(v, P[k : k + 1])
        expect = bool(z[0] > 0 and in_image(v, uv)[0])
        if expect and v.kind == PROJECTOR:
            expect = shading_factor(v.center, P[k], N[k]) > 0
        if expect:
            expect = not segment_blocked_bruteforce(P[k] + eps * N[k], v.center, mesh)
        assert got == expect, k


# --- properties ------------------------------------------------------------------

coord = st.floats(-1, 1, allow_nan=False)
vec3 = arrays(float, 3, elements=coord)


@PROPS
@given(vec3, st.floats(0.1, 10.0), vec3)
def test_projection_homogeneity(p, s, t):
    pose = Pose.look_at([0.3, -2.0, 0.8], [0, 0, 0])
    view = DeviceView("c", CAMERA, Intrinsics.centered(700, 640, 480), pose)
    p = 0.3 * p
    uv, z = project_points(view, p)
    scaled = DeviceView("c", CAMERA, view.intrinsics, Pose(pose.rotation, s * pose.translation))
    uv2, z2 = project_points(scaled, s * p)
    np.testing.assert_allclose(uv2, uv, rtol=1e-9, atol=1e-9)


@PROPS
@given(vec3, vec3, st.floats(0.05, 20.0))
def test_shading_scales_inverse_square(n, d, s):
    if np.linalg.norm(n) < 1e-3 or np.linalg.norm(d) < 1e-3:
        return
    n = n / np.linalg.norm(n)
    p = np.array([0.1, 0.2, -0.3])
    a = shading_factor(p + d, p, n)
    b = shading_factor(s * (p + d), s * p, n)
    assert b == pytest.approx(a / s**2, rel=1e-9, abs=1e-300)
    assert a >= 0


@PROPS
@given(arrays(float, 3, elements=st.floats(-0.3, 0.3)))
def test_triangulate_project_identity(p):
    views = _ring()
    got = triangulate([(v, project(v, p)) for v in views])
    np.testing.assert_allclose(got, p, atol=1e-9)


@PROPS
@given(arrays(float, (20, 3), elements=coord))
def test_normals_unit_length(P):
    if np.linalg.matrix_rank(P - P.mean(0)) < 1:
        return
    n = estimate_normals(P, 5, viewpoints=[[3.0, 0, 0]])
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1, atol=1e-9)
