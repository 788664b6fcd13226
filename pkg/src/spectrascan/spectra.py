"""From a reconstruction and colour captures to per-point reflectance spectra.

Stages: normals from the reconstructed points, a per-point visibility set
over capture pairs, bilinear sampling of the colour images, the batched
shading-aware solve, and export (PLY, CSV, JSON).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DeviceView, RayCaster, TriangleMesh, estimate_normals, in_image, project_points, shading_factors, visible_pair_set
from .imageio import write_json
from .plyio import write_points
from .spectral_model import BasisModel, IlluminationSet, SensitivityMatrix, SpectralCurve, WavelengthGrid, reflectance_to_srgb
from .spectral_solver import (
    DEFAULT_GAMMA,
    SpectralEstimate,
    assemble_observations,
    baseline_solve,
    solve_all,
    sufficient_statistics,
)


def spectral_assets(manifest: dict) -> tuple[WavelengthGrid, IlluminationSet, SensitivityMatrix]:
    """Wavelength grid, illuminants and camera sensitivity recorded in a capture manifest."""
    grid = WavelengthGrid(**manifest["grid"])
    illum = IlluminationSet(grid, np.asarray(manifest["illuminants"], float), tuple(manifest["illuminant_names"]))
    sens = SensitivityMatrix(grid, np.asarray(manifest["sensitivity"], float))
    return grid, illum, sens


# --- point-based visibility -----------------------------------------------------


def splat_radius(uv: np.ndarray, max_radius: int = 8) -> int:
    """Splat radius in pixels that closes the gaps between projected points."""
    if len(uv) < 2:
        return 1
    d, _ = cKDTree(uv).query(uv, k=2)
    return int(np.clip(np.ceil(np.median(d[:, 1])), 1, max_radius))


def depth_buffer(view: DeviceView, points, radius: int | None = None):
    """Nearest depth per pixel with every point splatted as a disc.

    Returns ``(zbuf (H, W), uv, z, inside, radius)``.
    """
    K = view.intrinsics
    uv, z = project_points(view, points)
    inside = (z > 0) & in_image(view, uv)
    idx = np.flatnonzero(inside)
    if radius is None:
        radius = splat_radius(uv[idx]) if idx.size else 1
    zbuf = np.full(K.height * K.width, np.inf)
    px = np.floor(uv[idx]).astype(np.int64)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius:
                continue
            x = px[:, 0] + dx
            y = px[:, 1] + dy
            ok = (x >= 0) & (x < K.width) & (y >= 0) & (y < K.height)
            np.minimum.at(zbuf, y[ok] * K.width + x[ok], z[idx][ok])
    return zbuf.reshape(K.height, K.width), uv, z, inside, radius


def zbuffer_visibility(view: DeviceView, points, normals, depth_tol: float, radius: int | None = None) -> np.ndarray:
    """Points whose depth is within tolerance of the splatted front surface.

    The tolerance grows with the splat footprint so oblique surfaces do not
    occlude themselves: ``depth_tol + 4 r z / f``. Back-facing points (normal
    away from the device centre) are never visible.
    """
    points = np.asarray(points, float)
    zbuf, uv, z, inside, r = depth_buffer(view, points, radius)
    out = np.zeros(len(points), dtype=bool)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return out
    px = np.floor(uv[idx]).astype(np.int64)
    front = zbuf[px[:, 1], px[:, 0]]
    tol = depth_tol + 4.0 * r * z[idx] / view.intrinsics.fx
    facing = np.einsum("ij,ij->i", np.asarray(normals)[idx], view.center - points[idx]) > 0
    out[idx] = (z[idx] <= front + tol) & facing
    return out


def point_visibility(
    points,
    normals,
    pairs: Sequence[tuple[DeviceView, DeviceView]],
    mesh: TriangleMesh | RayCaster | None = None,
    eps: float | None = None,
    depth_tol: float | None = None,
) -> list[list[int]]:
    """Visibility set (pair indices) of every point.

    With a mesh, shadow and occlusion rays are cast against it (offset
    ``eps`` along the normal); without one a splatted depth buffer of the
    point cloud stands in for the surface.
    """
    points = np.atleast_2d(np.asarray(points, float))
    diag = float(np.linalg.norm(points.max(0) - points.min(0))) if len(points) else 1.0
    if mesh is not None:
        caster = mesh if isinstance(mesh, RayCaster) else RayCaster(mesh)
        return visible_pair_set(points, normals, pairs, caster, eps if eps is not None else 2e-3 * diag)
    tol = depth_tol if depth_tol is not None else 5e-3 * diag
    cache: dict[int, np.ndarray] = {}  # keyed by object: ids may repeat across poses

    def mask(view):
        if id(view) not in cache:
            cache[id(view)] = zbuffer_visibility(view, points, normals, tol)
        return cache[id(view)]

    if not pairs:
        return [[] for _ in range(len(points))]
    table = np.column_stack([mask(p) & mask(c) for p, c in pairs])
    return [list(map(int, np.flatnonzero(row))) for row in table]


# --- scene assembly ---------------------------------------------------------------


@dataclass(eq=False)
class SpectralPoints:
    """Reconstructed points with normals, visibility and spectral estimates.

    ``positions[c]`` holds each point's pixel position in the camera of pair
    ``c`` (NaN where unknown); ``shading[k]`` maps pair index to the shading
    factor of point ``k``.
    """

    points: np.ndarray
    normals: np.ndarray
    track_ids: np.ndarray
    visibility: list
    positions: dict
    shading: list
    observations: list = field(default_factory=list)
    estimates: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def reflectances(self) -> np.ndarray:
        """``(n, N)`` estimated reflectance; NaN rows for unestimated points."""
        n_wl = next((e.reflectance.grid.count for e in self.estimates if e.reflectance is not None), 0)
        out = np.full((len(self.estimates), n_wl), np.nan)
        for k, e in enumerate(self.estimates):
            if e.reflectance is not None:
                out[k] = e.reflectance.values
        return out

    @property
    def estimated(self) -> np.ndarray:
        return np.array([e.estimated for e in self.estimates], dtype=bool)


def track_positions(tracks, track_ids, camera_id: str) -> np.ndarray:
    """Mean camera-decoded position of each track in ``camera_id`` (NaN if absent)."""
    out = np.full((len(track_ids), 2), np.nan)
    if camera_id not in tracks.view_ids:
        return out
    vi = tracks.view_index(camera_id)
    sel = np.flatnonzero(tracks.obs_view == vi)
    lookup = {int(t): i for i, t in enumerate(track_ids)}
    for o in sel:
        i = lookup.get(int(tracks.obs_track[o]))
        if i is not None:
            out[i] = tracks.obs_uv[o]
    return out


def prepare_points(
    points,
    views: dict[str, DeviceView],
    pairs: Sequence[tuple[str, str]],
    tracks=None,
    track_ids=None,
    normals=None,
    mesh=None,
    eps: float | None = None,
    k_neighbors: int = 16,
    exclude_pairs: Sequence[int] = (),
) -> SpectralPoints:
    """Normals, visibility, camera positions and shading for a point set.

    Pairs whose devices are missing from ``views`` or listed in
    ``exclude_pairs`` are left out of every visibility set.
    """
    points = np.asarray(points, float)
    if normals is None:
        centres = [v.center for v in views.values()]
        normals = estimate_normals(points, k=min(k_neighbors, len(points)), viewpoints=centres)
    usable = [i for i, (p, c) in enumerate(pairs) if p in views and c in views and i not in set(exclude_pairs)]
    pair_views = [(views[pairs[i][0]], views[pairs[i][1]]) for i in usable]
    vis_local = point_visibility(points, normals, pair_views, mesh=mesh, eps=eps)
    visibility = [[usable[j] for j in v] for v in vis_local]
    positions = {}
    shade = np.zeros((len(points), len(pairs)))
    for i in usable:
        proj, cam = views[pairs[i][0]], views[pairs[i][1]]
        uv, _ = project_points(cam, points)
        if tracks is not None and track_ids is not None:
            tp = track_positions(tracks, track_ids, cam.id)
            have = np.all(np.isfinite(tp), axis=1)
            uv[have] = tp[have]
        positions[i] = uv
        shade[:, i] = shading_factors(proj.center, points, normals)
    shading = [{i: float(shade[k, i]) for i in v} for k, v in enumerate(visibility)]
    return SpectralPoints(
        points, normals, np.asarray(track_ids if track_ids is not None else np.arange(len(points))), visibility, positions, shading
    )


def estimate_spectra(
    sp: SpectralPoints,
    color_images,
    basis: BasisModel,
    illum: IlluminationSet,
    sens: SensitivityMatrix,
    gamma: float = DEFAULT_GAMMA,
    workers: int = 1,
) -> SpectralPoints:
    """Assemble observations and solve every point in place; returns ``sp``."""
    sp.observations = assemble_observations(sp.positions, color_images, sp.visibility)
    sp.estimates = solve_all(sp.observations, sp.shading, basis, illum, sens, gamma, workers=workers)
    return sp


def estimate_baseline(
    sp: SpectralPoints,
    color_images,
    pair_index: int,
    basis: BasisModel,
    illum: IlluminationSet,
    sens: SensitivityMatrix,
    gamma: float = DEFAULT_GAMMA,
) -> list[SpectralEstimate]:
    """Single-pair, shading-ignoring estimate for points that pair sees."""
    vis = [[pair_index] if pair_index in v else [] for v in sp.visibility]
    obs = assemble_observations(sp.positions, color_images, vis)
    out = []
    nan = np.full(basis.n_basis, np.nan)
    for o in obs:
        out.append(baseline_solve(o[0], basis, illum, sens, gamma) if o else SpectralEstimate(nan, None, float("nan"), 0))
    return out


def point_statistics(sp: SpectralPoints, n_entries: int):
    """Per-point ``(w, z, n_pairs)`` of the assembled observations."""
    W = np.zeros((len(sp), n_entries))
    Z = np.zeros((len(sp), n_entries))
    used = np.zeros(len(sp), np.int64)
    for k, obs in enumerate(sp.observations):
        s = [sp.shading[k].get(o.pair_index, 0.0) for o in obs]
        W[k], Z[k], _, used[k] = sufficient_statistics(obs, s, n_entries)
    return W, Z, used


def pooled_statistics(W, Z, used, labels, n_groups: int):
    """Mean statistics of the points of each group (label ``-1`` is ignored).

    Pooling treats a group as one surface of uniform reflectance observed
    through all its points.
    """
    Wp = np.zeros((n_groups, W.shape[1]))
    Zp = np.zeros_like(Wp)
    for g in range(n_groups):
        sel = (labels == g) & (used > 0)
        if sel.any():
            Wp[g] = W[sel].mean(axis=0)
            Zp[g] = Z[sel].mean(axis=0)
    return Wp, Zp


# --- export -----------------------------------------------------------------------


def srgb_colors(reflectances: np.ndarray, illuminant: SpectralCurve) -> np.ndarray:
    out = np.zeros((len(reflectances), 3))
    for k, r in enumerate(reflectances):
        if np.all(np.isfinite(r)):
            out[k] = reflectance_to_srgb(SpectralCurve(illuminant.grid, r), illuminant)
    return out


def export_spectra(directory, sp: SpectralPoints, grid, display_illuminant: SpectralCurve | None = None) -> dict:
    """Write ``spectra.ply``, ``spectra.csv`` and ``summary.json`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    refl = sp.reflectances
    if refl.shape[1] == 0:
        refl = np.full((len(sp), grid.count), np.nan)
    illum = display_illuminant or SpectralCurve.constant(grid, 1.0)
    colors = srgb_colors(refl, illum)
    est = sp.estimated
    write_points(
        directory / "spectra.ply",
        sp.points,
        sp.normals,
        extra={
            "reflectance": np.nan_to_num(refl),
            "estimated": est.astype(float),
            "pairs_used": np.array([e.pairs_used for e in sp.estimates], float),
        },
        colors=colors,
    )
    with open(directory / "spectra.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "track", "pairs_used", "residual"] + [f"{wl:g}" for wl in grid.wavelengths])
        for k, e in enumerate(sp.estimates):
            vals = [f"{v:.8g}" for v in refl[k]] if e.estimated else [""] * grid.count
            w.writerow([k, int(sp.track_ids[k]), e.pairs_used, f"{e.residual:.8g}" if e.estimated else ""] + vals)
    residuals = np.array([e.residual for e in sp.estimates if e.estimated])
    hist, edges = np.histogram(residuals, bins=20) if residuals.size else (np.zeros(0, int), np.zeros(0))
    summary = {
        "n_points": len(sp),
        "n_estimated": int(est.sum()),
        "n_unestimated": int((~est).sum()),
        "grid": grid.to_dict(),
        "residual_histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
        "points": [{"residual": e.residual if e.estimated else None, "pairs_used": e.pairs_used} for e in sp.estimates],
    }
    write_json(directory / "summary.json", summary)
    return summary


def spectral_rmse(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Row-wise RMSE between reflectance arrays."""
    return np.sqrt(np.mean((np.asarray(estimate) - np.asarray(truth)) ** 2, axis=-1))

