"""Relighting a spectral point cloud under new point lights, rendered by splatting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PROJECTOR, DeviceView, Intrinsics, Pose, project_points, shading_factors
from .spectral_model import SensitivityMatrix, SpectralCurve
from .spectra import depth_buffer, zbuffer_visibility


@dataclass(frozen=True, eq=False)
class Light:
    """A point light (or, with ``at_infinity``, a directional one).

    ``position`` is the emitter centre; for a directional light it is the
    direction towards the light. ``view`` optionally gives the light's own
    pinhole frame (a projector) for shadow tests.
    """

    position: np.ndarray
    spectrum: SpectralCurve
    at_infinity: bool = False
    view: DeviceView | None = None

    def __post_init__(self):
        p = np.asarray(self.position, float).reshape(3)
        if self.at_infinity:
            n = np.linalg.norm(p)
            if n == 0:
                raise ValueError("directional light needs a nonzero direction")
            p = p / n
        object.__setattr__(self, "position", p)


def _shadow_view(light: Light, points, size: int | None = None) -> DeviceView:
    """A virtual square camera at the light that frames every point.

    The default resolution keeps neighbouring splats a few pixels apart, so
    sparse clouds do not leak light through the gaps of the depth map.
    """
    if size is None:
        size = int(np.clip(2.0 * np.sqrt(len(points)), 64, 1024))
    centroid = points.mean(axis=0)
    if light.at_infinity:
        extent = np.linalg.norm(points - centroid, axis=1).max()
        center = centroid + light.position * 10.0 * max(extent, 1e-9)
    else:
        center = light.position
    pose = Pose.look_at(center, centroid)
    Xc = pose.transform(points)
    front = Xc[:, 2] > 0
    if not front.any():
        return DeviceView("light", PROJECTOR, Intrinsics.centered(1.0, size, size), pose)
    half = np.abs(Xc[front, :2] / Xc[front, 2:3]).max()
    focal = 0.5 * size / max(half, 1e-9) * 0.98
    return DeviceView("light", PROJECTOR, Intrinsics.centered(focal, size, size), pose)


def light_shading(light: Light, points, normals, shadows: bool = True, depth_tol: float | None = None) -> np.ndarray:
    """Per-point irradiance factor of one light (inverse square unless at infinity)."""
    points = np.asarray(points, float)
    normals = np.asarray(normals, float)
    if light.at_infinity:
        s = np.maximum(normals @ light.position, 0.0)
    else:
        s = shading_factors(light.position, points, normals)
    if shadows and len(points):
        view = light.view or _shadow_view(light, points)
        diag = float(np.linalg.norm(points.max(0) - points.min(0)))
        tol = depth_tol if depth_tol is not None else 5e-3 * diag
        lit = zbuffer_visibility(view, points, normals, tol)
        s = np.where(lit, s, 0.0)
    return s


def point_radiance(points, normals, reflectances, lights, sens: SensitivityMatrix, shadows: bool = True) -> np.ndarray:
    """Camera RGB of every point: ``sum_lights s * C^T (l * r)``.

    Raises:
        ValueError: ``lights`` is empty.
    """
    lights = list(lights)
    if not lights:
        raise ValueError("relighting needs at least one light")
    refl = np.asarray(reflectances, float)
    out = np.zeros((len(refl), 3))
    for light in lights:
        s = light_shading(light, points, normals, shadows)
        out += s[:, None] * ((refl * light.spectrum.values) @ sens.rows.T)
    return out


def splat_image(view: DeviceView, points, values, radius: int | None = None):
    """Render per-point values into ``view``: each pixel shows its nearest splat.

    Returns ``(image (H, W, C), mask (H, W))``.
    """
    K = view.intrinsics
    values = np.asarray(values, float)
    values = values[:, None] if values.ndim == 1 else values
    zbuf, uv, z, inside, r = depth_buffer(view, points, radius)
    img = np.zeros((K.height, K.width, values.shape[1]))
    mask = np.zeros((K.height, K.width), dtype=bool)
    idx = np.flatnonzero(inside)
    px = np.floor(uv[idx]).astype(np.int64)
    # owner of each pixel: the point whose depth wrote the buffer (lowest index on ties)
    n = len(values)
    owner = np.full(K.height * K.width, n, dtype=np.int64)
    zflat = zbuf.ravel()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy > r * r:
                continue
            x = px[:, 0] + dx
            y = px[:, 1] + dy
            ok = (x >= 0) & (x < K.width) & (y >= 0) & (y < K.height)
            flat = y[ok] * K.width + x[ok]
            win = z[idx[ok]] == zflat[flat]
            np.minimum.at(owner, flat[win], idx[ok][win])
    has = owner < n
    img.reshape(-1, values.shape[1])[has] = values[owner[has]]
    mask.ravel()[has] = True
    return img, mask


def relight(points, normals, reflectances, lights, view: DeviceView, sens: SensitivityMatrix, shadows: bool = True):
    """Relit image of the estimated points seen from ``view``.

    Points with non-finite reflectance are dropped. Returns
    ``(image (H, W, 3), mask, per-point radiance)``.
    """
    refl = np.asarray(reflectances, float)
    keep = np.all(np.isfinite(refl), axis=1)
    pts = np.asarray(points, float)[keep]
    nrm = np.asarray(normals, float)[keep]
    rad = point_radiance(pts, nrm, refl[keep], lights, sens, shadows)
    img, mask = splat_image(view, pts, rad)
    full = np.full((len(refl), 3), np.nan)
    full[keep] = rad
    return img, mask, full


def sample_points(view: DeviceView, image, points) -> np.ndarray:
    """Nearest-pixel values of ``image`` at the projections of ``points`` (NaN outside)."""
    uv, z = project_points(view, points)
    K = view.intrinsics
    px = np.floor(uv).astype(np.int64)
    ok = (z > 0) & (px[:, 0] >= 0) & (px[:, 0] < K.width) & (px[:, 1] >= 0) & (px[:, 1] < K.height)
    out = np.full((len(points),) + image.shape[2:], np.nan)
    out[ok] = image[px[ok, 1], px[ok, 0]]
    return out
