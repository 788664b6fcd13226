"""Ground-truth scenes and forward rendering of the full capture protocol.

A capture alternates device moves around the object: the first camera and
projector are placed, then the camera and projector take turns moving, and
after every move the current (projector, camera) pair records one Gray-code
stack plus one RGB image per uniform colour illumination. Rendering is
Lambertian with inverse-square fall-off from a pinhole projector, hard
shadows and no inter-reflection.

Images are produced lazily and deterministically: the noise of frame ``f``
of pair ``p`` comes from a generator keyed on ``(seed, p, f)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import (
    load_camera_sensitivity,
    load_colorchecker,
    load_training_reflectances,
    default_basis,
    projector_illuminants,
)
from .geometry import (
    CAMERA,
    PROJECTOR,
    DeviceView,
    Intrinsics,
    Pose,
    RayCaster,
    TriangleMesh,
    in_image,
    project_points,
    shading_factors,
)
from .imageio import read_json, read_pfm, write_json, write_pfm
from .plyio import write_mesh
from .spectral_model import (
    IlluminationSet,
    SensitivityMatrix,
    WavelengthGrid,
    forward_matrix,
)
from .structured_light import GrayCodeSpec, generate_patterns, read_stack, write_stack

PRESETS = ("colorchart", "blob", "sphere")
CAPTURE_FORMAT = "spectrascan-capture/1"


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be nonnegative, got {self.sigma}")


@dataclass(eq=False)
class SyntheticScene:
    name: str
    mesh: TriangleMesh
    reflectances: np.ndarray
    material_names: list[str]
    views: dict[str, DeviceView]
    trajectory: list[dict]
    pairs: list[tuple[str, str]]
    illum: IlluminationSet
    sens: SensitivityMatrix
    gray: GrayCodeSpec
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    ambient: float = 0.0
    pattern_exposure: float = 4.0
    seed: int = 0
    info: dict = field(default_factory=dict)

    @property
    def grid(self) -> WavelengthGrid:
        return self.illum.grid

    @property
    def cameras(self) -> list[DeviceView]:
        return [v for v in self.views.values() if v.kind == CAMERA]

    @property
    def projectors(self) -> list[DeviceView]:
        return [v for v in self.views.values() if v.kind == PROJECTOR]

    @property
    def scale_reference(self) -> dict:
        a, b = self.cameras[0], self.projectors[0]
        return {"a": a.id, "b": b.id, "distance": float(np.linalg.norm(a.center - b.center))}


# --- meshes -------------------------------------------------------------------


def plane_mesh(x0, x1, y0, y1, nx, ny, z=0.0) -> tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    V = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    a = (j * (nx + 1) + i).ravel()
    b, c, d = a + 1, a + nx + 2, a + nx + 1
    F = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return V, F


def box_mesh(lo, hi) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    V = np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])
    F = np.array(
        [
            [0, 2, 3], [0, 3, 1],  # bottom (-z)
            [4, 5, 7], [4, 7, 6],  # top (+z)
            [0, 1, 5], [0, 5, 4],  # -y
            [2, 6, 7], [2, 7, 3],  # +y
            [0, 4, 6], [0, 6, 2],  # -x
            [1, 3, 7], [1, 7, 5],  # +x
        ]
    )
    return V, F


def uv_sphere(n_lat: int, n_lon: int, radius_fn) -> tuple[np.ndarray, np.ndarray]:
    """Sphere-topology mesh with ``(n_lat - 1) * n_lon + 2`` vertices.

    ``radius_fn(theta, phi)`` gives the radius at polar angle ``theta`` and
    azimuth ``phi``; faces wind counter-clockwise seen from outside.
    """
    theta = np.pi * np.arange(1, n_lat) / n_lat
    phi = 2 * np.pi * np.arange(n_lon) / n_lon
    T, P = np.meshgrid(theta, phi, indexing="ij")
    R = radius_fn(T, P)
    ring = np.stack([R * np.sin(T) * np.cos(P), R * np.sin(T) * np.sin(P), R * np.cos(T)], axis=-1).reshape(-1, 3)
    top = np.array([[0, 0, radius_fn(np.array(0.0), np.array(0.0))]], dtype=float)
    bottom = np.array([[0, 0, -radius_fn(np.array(np.pi), np.array(0.0))]], dtype=float)
    V = np.concatenate([top, ring, bottom])
    nb = len(V) - 1

    def vid(i, j):
        return 1 + i * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append([0, vid(0, j), vid(0, j + 1)])
        faces.append([nb, vid(n_lat - 2, j + 1), vid(n_lat - 2, j)])
    i, j = np.meshgrid(np.arange(n_lat - 2), np.arange(n_lon), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    F = np.concatenate([np.array(faces), np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return V, F


def _merge(parts):
    V, F, M = [], [], []
    off = 0
    for v, f, m in parts:
        V.append(v)
        F.append(f + off)
        M.append(np.broadcast_to(m, (len(f),)))
        off += len(v)
    return TriangleMesh(np.concatenate(V), np.concatenate(F), np.concatenate(M))


# --- rig ----------------------------------------------------------------------


def alternating_rig(
    n_cameras: int,
    n_projectors: int,
    target,
    arc_deg: tuple[float, float],
    cam_radius: float,
    cam_height: float,
    proj_radius: float,
    proj_height: float,
    cam_intr: Intrinsics,
    proj_intr: Intrinsics,
    jitter: float = 0.0,
    rng=None,
):
    """Devices on an arc in capture order camera, projector, camera, ...

    Returns ``(views, trajectory, pairs)``.
    """
    if not n_cameras - 1 <= n_projectors <= n_cameras:
        raise ValueError("alternating capture needs n_cameras - 1 <= n_projectors <= n_cameras")
    target = np.asarray(target, float)
    n = n_cameras + n_projectors
    angles = np.radians(np.linspace(arc_deg[0], arc_deg[1], n))
    views: dict[str, DeviceView] = {}
    cams, projs = [], []
    for k, a in enumerate(angles):
        is_cam = k % 2 == 0
        r, h = (cam_radius, cam_height) if is_cam else (proj_radius, proj_height)
        c = target + np.array([r * np.cos(a), r * np.sin(a), h])
        aim = target.copy()
        if rng is not None and jitter:
            c = c + rng.normal(0, jitter, 3)
            aim = aim + rng.normal(0, jitter, 3)
        if is_cam:
            vid = f"cam{len(cams)}"
            cams.append(vid)
            views[vid] = DeviceView(vid, CAMERA, cam_intr, Pose.look_at(c, aim))
        else:
            vid = f"proj{len(projs)}"
            projs.append(vid)
            views[vid] = DeviceView(vid, PROJECTOR, proj_intr, Pose.look_at(c, aim))
    trajectory = [{"step": 0, "move": "start", "camera": cams[0], "projector": projs[0]}]
    pairs = [(projs[0], cams[0])]
    cur_cam, cur_proj = cams[0], projs[0]
    ci, pi = 1, 1
    step = 1
    while ci < len(cams) or pi < len(projs):
        if ci < len(cams) and (ci <= pi):
            cur_cam = cams[ci]
            ci += 1
            trajectory.append({"step": step, "move": "camera", "camera": cur_cam})
        else:
            cur_proj = projs[pi]
            pi += 1
            trajectory.append({"step": step, "move": "projector", "projector": cur_proj})
        pairs.append((cur_proj, cur_cam))
        step += 1
    return views, trajectory, pairs


# --- presets ------------------------------------------------------------------

_DEFAULTS = {
    "seed": 0,
    "grid": (410.0, 10.0, 27),
    "cam_size": (640, 480),
    "cam_focal": 800.0,
    "proj_size": (128, 96),
    "proj_focal": None,
    "n_cameras": 5,
    "n_projectors": 4,
    "noise_sigma": 0.0,
    "ambient": 0.0,
    "pattern_exposure": 4.0,
    "reflectance_mode": "preset",
    "power_target": 0.85,
    "pose_jitter": 0.0,
}


def _random_reflectances(grid, n, rng, basis=None):
    """Smooth plausible reflectances: convex mixes of training curves."""
    train = np.stack([c.values for c in load_training_reflectances(grid)])
    out = []
    while len(out) < n:
        w = rng.dirichlet(np.full(3, 0.5))
        r = w @ train[rng.choice(len(train), 3, replace=False)]
        if basis is not None:
            r = basis.basis @ (basis.basis.T @ r)
        if r.min() > 0.01 and r.max() < 0.95:
            out.append(r)
    return np.array(out)


def build_scene(preset: str = "blob", overrides: dict | None = None) -> SyntheticScene:
    """Construct a deterministic synthetic scene.

    Presets: ``colorchart`` (24-patch chart on a table beside a block, oblique
    projectors), ``blob`` (bumpy sculpture on a stand, devices around it) and
    ``sphere`` (sectored sphere on a stand). ``overrides`` may set any key of
    the preset defaults, e.g. ``seed``, ``noise_sigma``, ``proj_size``,
    ``reflectance_mode`` (``"preset"`` or ``"basis"`` for reflectances inside
    the default basis span), ``n_lat``/``n_lon``/``radius`` for spheres.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    cfg = dict(_DEFAULTS)
    if preset == "colorchart":
        # the corner-sample bound is loose for the large table: the chart itself is far dimmer
        cfg["power_target"] = 3.0
    else:
        cfg["power_target"] = 1.3
    cfg.update(overrides or {})
    unknown = set(cfg) - set(_DEFAULTS) - {"n_lat", "n_lon", "radius", "arc_deg", "baseline_pair"}
    if unknown:
        raise ValueError(f"unknown scene overrides: {sorted(unknown)}")
    rng = np.random.default_rng(cfg["seed"])
    grid = WavelengthGrid(*cfg["grid"])
    sens = load_camera_sensitivity(grid)
    basis = default_basis(grid) if cfg["reflectance_mode"] == "basis" else None
    cam_intr = Intrinsics.centered(cfg["cam_focal"], *cfg["cam_size"])

    if preset == "colorchart":
        mesh, refl, names, info = _chart_scene(grid, cfg, rng, basis)
        target = np.array([0.0, 0.0, 0.0])
        proj_focal = cfg["proj_focal"] or 220.0 * cfg["proj_size"][0] / 128
        rig = dict(arc_deg=cfg.get("arc_deg", (-120.0, 120.0)), cam_radius=0.45, cam_height=0.6, proj_radius=0.7, proj_height=0.3)
    else:
        mesh, refl, names, info = _object_scene(preset, grid, cfg, rng, basis)
        target = np.array([0.0, 0.0, 0.0])
        proj_focal = cfg["proj_focal"] or 170.0 * cfg["proj_size"][0] / 128
        rig = dict(arc_deg=cfg.get("arc_deg", (-144.0, 144.0)), cam_radius=1.0, cam_height=0.35, proj_radius=1.0, proj_height=0.45)
    proj_intr = Intrinsics.centered(proj_focal, *cfg["proj_size"])
    views, trajectory, pairs = alternating_rig(
        cfg["n_cameras"], cfg["n_projectors"], target, cam_intr=cam_intr, proj_intr=proj_intr,
        jitter=cfg["pose_jitter"], rng=rng, **rig,
    )

    # scale illuminant power so the brightest possible observation is ~power_target
    unit = projector_illuminants(grid, 1.0)
    A = forward_matrix(unit, sens)
    centroids = mesh.corners.mean(axis=1)
    # sample centroids and points near each corner: big flat triangles vary a lot
    samples = np.concatenate([centroids[:, None], 0.9 * mesh.corners + 0.1 * centroids[:, None]], axis=1)
    centroids = samples.reshape(-1, 3)
    normals = np.repeat(mesh.face_normals, 4, axis=0)
    s_max = max(shading_factors(v.center, centroids, normals).max() for v in views.values() if v.kind == PROJECTOR)
    y_max = (A @ refl.T).max() * s_max
    illum = projector_illuminants(grid, cfg["power_target"] / y_max)

    info.update(config={k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()})
    return SyntheticScene(
        name=preset,
        mesh=mesh,
        reflectances=refl,
        material_names=names,
        views=views,
        trajectory=trajectory,
        pairs=pairs,
        illum=illum,
        sens=sens,
        gray=GrayCodeSpec(*cfg["proj_size"]),
        noise=NoiseSpec(cfg["noise_sigma"], cfg["seed"]),
        ambient=cfg["ambient"],
        pattern_exposure=cfg["pattern_exposure"],
        seed=cfg["seed"],
        info=info,
    )


def _chart_scene(grid, cfg, rng, basis):
    chart = load_colorchecker(grid)
    patch, gap = 0.045, 0.006
    rows, cols = 4, 6
    w = cols * patch + (cols + 1) * gap
    h = rows * patch + (rows + 1) * gap
    x0, y0 = -w / 2, -h / 2
    parts = []
    # table with a hole-free underlay slightly below the chart
    V, F = plane_mesh(-0.32, 0.32, -0.26, 0.26, 8, 8, z=-0.0005)
    parts.append((V, F, 0))
    V, F = plane_mesh(x0, x0 + w, y0, y0 + h, 12, 8, z=0.0)
    parts.append((V, F, 25))
    patches = {}
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            px = x0 + gap + c * (patch + gap)
            # row 0 at +y so the chart reads top-left to bottom-right from the -y side
            py = y0 + h - (r + 1) * (patch + gap)
            V, F = plane_mesh(px, px + patch, py, py + patch, 3, 3, z=0.0002)
            parts.append((V, F, 1 + k))
            patches[k] = [px, px + patch, py, py + patch]
    V, F = box_mesh([0.19, -0.08, -0.001], [0.29, 0.04, 0.12])
    parts.append((V, F, 26))
    mesh = _merge(parts)
    names = ["table"] + list(chart) + ["chart_frame", "block"]
    refl = np.zeros((27, grid.count))
    refl[0] = 0.45 * np.ones(grid.count) + 0.05 * np.linspace(-1, 1, grid.count)
    refl[1:25] = np.stack([c.values for c in chart.values()])
    refl[25] = 0.04
    refl[26] = _random_reflectances(grid, 1, rng)[0]
    if basis is not None:
        refl = _random_reflectances(grid, len(refl), rng, basis)
    info = {"patches": patches, "patch_materials": list(range(1, 25)), "patch_height": 0.0002}
    return mesh, refl, names, info


def _object_scene(preset, grid, cfg, rng, basis):
    n_lat = cfg.get("n_lat", 64)
    n_lon = cfg.get("n_lon", 128)
    radius = cfg.get("radius", 0.2)
    if preset == "sphere":
        def rfn(t, p):
            return radius + 0.0 * t
    else:
        a1, a2, a3 = 0.22, 0.12, 0.10
        ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)

        def rfn(t, p):
            return radius * (
                1.0
                + a1 * np.sin(3 * p + ph1) * np.sin(t) ** 2
                + a2 * np.cos(2 * t)
                + a3 * np.sin(5 * p + ph2) * np.sin(2 * t)
            )
    V, F = uv_sphere(n_lat, n_lon, rfn)
    # materials: azimuth sectors crossed with upper/lower halves
    c = V[F].mean(axis=1)
    sector = (np.floor((np.arctan2(c[:, 1], c[:, 0]) + np.pi) / (2 * np.pi) * 6).astype(int)) % 6
    upper = (c[:, 2] > 0).astype(int)
    mat = sector * 2 + upper
    zmin = V[:, 2].min()
    Vb, Fb = box_mesh([-0.08, -0.08, zmin - 0.15], [0.08, 0.08, zmin + 0.02])
    mesh = _merge([(V, F, mat), (Vb, Fb, 12)])
    refl = _random_reflectances(grid, 13, rng, basis)
    names = [f"region{k}" for k in range(12)] + ["stand"]
    return mesh, refl, names, {"radius": radius, "n_lat": n_lat, "n_lon": n_lon}


# --- rendering ----------------------------------------------------------------


@dataclass(eq=False)
class _CameraHits:
    points: np.ndarray
    normals: np.ndarray
    material: np.ndarray
    triangle: np.ndarray
    valid: np.ndarray


class RenderedCapture:
    """Lazily rendered images and ground truth for every capture pair."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        self.caster = RayCaster(scene.mesh)
        self._hits: dict[str, _CameraHits] = {}
        self._pairs: dict[int, dict] = {}
        self._forward = forward_matrix(scene.illum, scene.sens)
        # per material: (N_l*3,) noiseless response at unit shading
        self._response = scene.reflectances @ self._forward.T
        white = scene.illum.index("white") if "white" in scene.illum.names else len(scene.illum) - 1
        self._luma = self._response[:, 3 * white : 3 * white + 3].mean(axis=1)

    # ground truth ------------------------------------------------------------
    def camera_hits(self, cam_id: str) -> _CameraHits:
        if cam_id not in self._hits:
            view = self.scene.views[cam_id]
            K = view.intrinsics
            ys, xs = np.mgrid[0 : K.height, 0 : K.width]
            uv = np.column_stack([xs.ravel() + 0.5, ys.ravel() + 0.5])
            pts, depth, tri = self.caster.cast(view, uv)
            valid = np.isfinite(depth)
            normals = np.zeros_like(pts)
            normals[valid] = self.scene.mesh.face_normals[tri[valid]]
            mat = np.full(len(uv), -1, dtype=np.int64)
            mat[valid] = self.scene.mesh.materials[tri[valid]]
            shape = (K.height, K.width)
            self._hits[cam_id] = _CameraHits(
                pts.reshape(shape + (3,)), normals.reshape(shape + (3,)), mat.reshape(shape), tri.reshape(shape), valid.reshape(shape)
            )
        return self._hits[cam_id]

    def pair_truth(self, index: int) -> dict:
        """Per-pixel projector pixel, shading factor and lit mask for one pair."""
        if index not in self._pairs:
            proj_id, cam_id = self.scene.pairs[index]
            proj = self.scene.views[proj_id]
            hits = self.camera_hits(cam_id)
            shape = hits.valid.shape
            P = hits.points.reshape(-1, 3)
            N = hits.normals.reshape(-1, 3)
            valid = hits.valid.ravel().copy()
            uvp = np.full((len(P), 2), np.nan)
            s = np.zeros(len(P))
            idx = np.flatnonzero(valid)
            uv, z = project_points(proj, P[idx])
            ok = (z > 0) & in_image(proj, uv)
            idx, uv = idx[ok], uv[ok]
            sh = shading_factors(proj.center, P[idx], N[idx])
            ok = sh > 0
            idx, uv, sh = idx[ok], uv[ok], sh[ok]
            eps = 1e-6 * self.scene.mesh.bbox_diagonal
            clear = self.caster.unobstructed(proj, P[idx] + eps * N[idx])
            idx, uv, sh = idx[clear], uv[clear], sh[clear]
            lit = np.zeros(len(P), dtype=bool)
            lit[idx] = True
            uvp[idx] = uv
            s[idx] = sh
            col = np.full(len(P), -1, dtype=np.int64)
            row = np.full(len(P), -1, dtype=np.int64)
            col[idx] = np.floor(uv[:, 0]).astype(np.int64)
            row[idx] = np.floor(uv[:, 1]).astype(np.int64)
            self._pairs[index] = {
                "projector": proj_id,
                "camera": cam_id,
                "lit": lit.reshape(shape),
                "shading": s.reshape(shape),
                "proj_uv": uvp.reshape(shape + (2,)),
                "proj_col": col.reshape(shape),
                "proj_row": row.reshape(shape),
            }
        return self._pairs[index]

    # images ------------------------------------------------------------------
    def _noisy(self, img: np.ndarray, pair: int, frame: int) -> np.ndarray:
        sigma = self.scene.noise.sigma
        if sigma > 0:
            rng = np.random.default_rng([self.scene.noise.seed, pair, frame])
            img = img + rng.normal(0.0, sigma, img.shape)
        return np.clip(img, 0.0, 1.0)

    def clean_pattern_stack(self, index: int) -> list[np.ndarray]:
        truth = self.pair_truth(index)
        hits = self.camera_hits(truth["camera"])
        mat = np.where(hits.valid, hits.material, 0)
        luma = np.where(hits.valid, self._luma[mat], 0.0)
        lit_level = self.scene.pattern_exposure * truth["shading"] * luma
        ambient = self.scene.pattern_exposure * self.scene.ambient * luma
        patterns = generate_patterns(self.scene.gray)
        col, row, lit = truth["proj_col"], truth["proj_row"], truth["lit"]
        frames = []
        for pat in patterns:
            on = np.zeros(lit.shape, dtype=bool)
            on[lit] = pat[row[lit], col[lit]]
            frames.append(np.where(on, lit_level, 0.0) + ambient)
        return frames

    def pattern_stack(self, index: int) -> list[np.ndarray]:
        return [self._noisy(f, index, k) for k, f in enumerate(self.clean_pattern_stack(index))]

    def clean_color_images(self, index: int) -> np.ndarray:
        """``(N_l, H, W, 3)`` linear RGB images before noise."""
        truth = self.pair_truth(index)
        hits = self.camera_hits(truth["camera"])
        mat = np.where(hits.valid, hits.material, 0)
        resp = self._response[mat]  # (H, W, 3 N_l)
        img = truth["shading"][..., None] * resp
        if self.scene.ambient:
            img = img + self.scene.ambient * np.where(hits.valid[..., None], resp, 0.0)
        n_l = len(self.scene.illum)
        return np.moveaxis(img.reshape(img.shape[:2] + (n_l, 3)), 2, 0)

    def color_images(self, index: int) -> np.ndarray:
        clean = self.clean_color_images(index)
        offset = 1000
        return np.stack([self._noisy(im, index, offset + n) for n, im in enumerate(clean)])

    @property
    def manifest(self) -> dict:
        return capture_manifest(self.scene)


def render_capture(scene: SyntheticScene) -> RenderedCapture:
    return RenderedCapture(scene)


def perturb(obj, sigma: float | None = None, seed: int | None = None, pose_sigma: float = 0.0):
    """Copy of a scene or capture with new image noise and/or pose jitter.

    ``pose_sigma`` jitters device centres (scene units) and re-aims them at
    the same point offset by the same amount. Pure: the input is unchanged.
    """
    if sigma is not None and sigma < 0:
        raise ValueError("noise sigma must be nonnegative")
    if pose_sigma < 0:
        raise ValueError("pose sigma must be nonnegative")
    scene = obj.scene if isinstance(obj, RenderedCapture) else obj
    noise = NoiseSpec(scene.noise.sigma if sigma is None else sigma, scene.noise.seed if seed is None else seed)
    views = scene.views
    if pose_sigma > 0:
        rng = np.random.default_rng([noise.seed, 7])
        views = {}
        for vid, v in scene.views.items():
            R = _small_rotation(rng.normal(0, pose_sigma, 3))
            c = v.center + rng.normal(0, pose_sigma, 3)
            Rn = R @ v.pose.rotation
            views[vid] = v.replace(pose=Pose(Rn, -Rn @ c))
    new = replace(scene, noise=noise, views=views, info=copy.deepcopy(scene.info))
    if isinstance(obj, RenderedCapture):
        return RenderedCapture(new)
    return new


def _small_rotation(w):
    th = np.linalg.norm(w)
    if th < 1e-16:
        return np.eye(3)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx


# --- capture files ------------------------------------------------------------


def capture_manifest(scene: SyntheticScene) -> dict:
    """Everything the pipeline may know: nominal intrinsics, spectra, pairs. No poses."""
    pairs = []
    for k, (p, c) in enumerate(scene.pairs):
        pairs.append(
            {
                "index": k,
                "projector": p,
                "camera": c,
                "patterns": f"pair_{k:02d}/pat_manifest.json",
                "color": {n: f"pair_{k:02d}/color_{n}.pfm" for n in scene.illum.names},
            }
        )
    return {
        "format": CAPTURE_FORMAT,
        "preset": scene.name,
        "seed": scene.seed,
        "grid": scene.grid.to_dict(),
        "illuminant_names": list(scene.illum.names),
        "illuminants": scene.illum.spectra.tolist(),
        "sensitivity": scene.sens.rows.tolist(),
        "gray_code": scene.gray.to_dict(),
        "devices": [{"id": v.id, "kind": v.kind, "intrinsics": v.intrinsics.to_dict()} for v in scene.views.values()],
        "pairs": pairs,
        "trajectory": scene.trajectory,
        "scale_reference": scene.scale_reference,
    }


def write_capture(capture: RenderedCapture, directory) -> Path:
    """Write images, manifest and a ground-truth sidecar under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scene = capture.scene
    manifest = capture_manifest(scene)
    for k, pair in enumerate(manifest["pairs"]):
        pdir = directory / f"pair_{k:02d}"
        write_stack(pdir, capture.pattern_stack(k), scene.gray, extra={"projector": pair["projector"], "camera": pair["camera"]})
        for name, img in zip(scene.illum.names, capture.color_images(k)):
            write_pfm(pdir / f"color_{name}.pfm", img)
    write_json(directory / "manifest.json", manifest)
    write_ground_truth(capture, directory / "ground_truth")
    return directory / "manifest.json"


def write_ground_truth(capture: RenderedCapture, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scene = capture.scene
    write_mesh(directory / "mesh.ply", scene.mesh)
    truth = {
        "preset": scene.name,
        "views": {v.id: {"kind": v.kind, "intrinsics": v.intrinsics.to_dict(), **v.pose.to_dict()} for v in scene.views.values()},
        "material_names": scene.material_names,
        "reflectances": scene.reflectances.tolist(),
        "noise": {"sigma": scene.noise.sigma, "seed": scene.noise.seed},
        "info": scene.info,
    }
    write_json(directory / "scene.json", truth)
    arrays = {}
    for k in range(len(scene.pairs)):
        t = capture.pair_truth(k)
        arrays[f"pair{k}_proj_col"] = t["proj_col"].astype(np.int32)
        arrays[f"pair{k}_proj_row"] = t["proj_row"].astype(np.int32)
        arrays[f"pair{k}_shading"] = t["shading"].astype(np.float64)
    np.savez_compressed(directory / "maps.npz", **arrays)


def load_ground_truth(directory) -> dict:
    """Read a ground-truth sidecar (test/evaluation use only)."""
    from .plyio import read_mesh

    directory = Path(directory)
    truth = read_json(directory / "scene.json")
    views = {}
    for vid, d in truth["views"].items():
        views[vid] = DeviceView(vid, d["kind"], Intrinsics(**d["intrinsics"]), Pose(d["rotation"], d["translation"]))
    truth["views"] = views
    truth["mesh"] = read_mesh(directory / "mesh.ply")
    truth["reflectances"] = np.asarray(truth["reflectances"])
    maps = directory / "maps.npz"
    if maps.exists():
        with np.load(maps) as z:
            truth["maps"] = {k: z[k] for k in z.files}
    return truth


class DiskCapture:
    """A capture directory written by :func:`write_capture` (or real data in that layout)."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.manifest = read_json(self.directory / "manifest.json")
        if self.manifest.get("format") != CAPTURE_FORMAT:
            raise ValueError(f"{directory}: unsupported capture format {self.manifest.get('format')!r}")

    def pattern_stack(self, index: int) -> list[np.ndarray]:
        frames, _ = read_stack(self.directory / self.manifest["pairs"][index]["patterns"])
        return frames

    def color_images(self, index: int) -> np.ndarray:
        pair = self.manifest["pairs"][index]
        return np.stack([read_pfm(self.directory / pair["color"][n]) for n in self.manifest["illuminant_names"]])
