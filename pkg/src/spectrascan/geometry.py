"""Pinhole devices, triangulation, normals, projector shading and visibility.

Conventions: a :class:`Pose` maps world points into the device frame as
``X = R @ p + t``; the device looks down its +z axis; pixel ``(x, y)`` covers
``[x, x+1) x [y, y+1)`` so its centre is ``(x + 0.5, y + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import BehindCameraError, DegenerateGeometryError

CAMERA = "camera"
PROJECTOR = "projector"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        """Square pixels, principal point at the image centre."""
        return cls(focal, focal, width / 2.0, height / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_focal(self, focal: float) -> "Intrinsics":
        return Intrinsics(focal, focal * self.fy / self.fx, self.cx, self.cy, self.width, self.height)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-device rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Device at ``center`` looking at ``target``; image y points away from ``up``."""
        center = np.asarray(center, float)
        z = np.asarray(target, float) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ center)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


@dataclass(frozen=True, eq=False)
class DeviceView:
    id: str
    kind: str
    intrinsics: Intrinsics
    pose: Pose

    def __post_init__(self):
        if self.kind not in (CAMERA, PROJECTOR):
            raise ValueError(f"kind must be camera or projector, got {self.kind!r}")

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.intrinsics.K @ np.column_stack([self.pose.rotation, self.pose.translation])

    def replace(self, intrinsics: Intrinsics | None = None, pose: Pose | None = None) -> "DeviceView":
        return DeviceView(self.id, self.kind, intrinsics or self.intrinsics, pose or self.pose)


@dataclass(frozen=True, eq=False)
class OrientedPoint:
    position: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, float).reshape(3)
        n = np.array(self.normal, float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("normal must be unit length")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    materials: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        if self.materials is not None:
            m = np.array(self.materials, dtype=np.int64).reshape(-1)
            if m.shape != (len(f),):
                raise ValueError("need one material id per triangle")
            object.__setattr__(self, "materials", m)

    @property
    def corners(self) -> np.ndarray:
        """``(n_tri, 3, 3)`` vertex positions of every triangle."""
        return self.vertices[self.triangles]

    @property
    def face_normals(self) -> np.ndarray:
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def transformed(self, scale: float, rotation, translation) -> "TriangleMesh":
        """Mesh with vertices mapped by ``scale * R @ v + t``."""
        v = scale * self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return TriangleMesh(v, self.triangles, self.materials)


# --- projection ---------------------------------------------------------------


def project_points(view: DeviceView, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(uv, depth)``; no depth check."""
    X = view.pose.transform(np.atleast_2d(points))
    z = X[:, 2]
    K = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([K.fx * X[:, 0] / z + K.cx, K.fy * X[:, 1] / z + K.cy])
    return uv, z


def project(view: DeviceView, p) -> tuple[float, float]:
    uv, z = project_points(view, np.asarray(p, float).reshape(1, 3))
    if not z[0] > 0:
        raise BehindCameraError(f"point {p} has depth {z[0]:.3g} in view {view.id}")
    return float(uv[0, 0]), float(uv[0, 1])


def in_image(view: DeviceView, uv: np.ndarray) -> np.ndarray:
    K = view.intrinsics
    return (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)


def pixel_rays(view: DeviceView, uv) -> np.ndarray:
    """Unit world-frame ray directions through pixel coordinates ``uv``."""
    uv = np.atleast_2d(uv)
    K = view.intrinsics
    d = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))])
    d = d @ view.pose.rotation
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# --- triangulation ------------------------------------------------------------


def triangulate(observations: Sequence[tuple[DeviceView, tuple[float, float]]]) -> np.ndarray:
    """Linear (DLT) triangulation from two or more views.

    Rows are built from normalised image coordinates so the system is well
    conditioned regardless of focal length.
    """
    if len(observations) < 2:
        raise DegenerateGeometryError("triangulation needs at least two views")
    rows = []
    rays = []
    centers = []
    for view, (u, v) in observations:
        K = view.intrinsics
        x = (u - K.cx) / K.fx
        y = (v - K.cy) / K.fy
        P = np.column_stack([view.pose.rotation, view.pose.translation])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
        rays.append(pixel_rays(view, [(u, v)])[0])
        centers.append(view.center)
    rays = np.array(rays)
    centers = np.array(centers)
    baseline = np.ptp(centers, axis=0).max()
    spread = np.linalg.norm(np.cross(rays[:, None], rays[None]), axis=-1).max()
    if spread < 1e-12 or baseline < 1e-12:
        raise DegenerateGeometryError("rays are parallel or share a single centre")
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise DegenerateGeometryError("triangulation system is rank deficient")
    X = vt[-1]
    if abs(X[3]) < 1e-14 * np.abs(X[:3]).max():
        raise DegenerateGeometryError("triangulated point is at infinity")
    return X[:3] / X[3]


def triangulate_batch(
    rotations: np.ndarray,
    translations: np.ndarray,
    normalized: np.ndarray,
    view_index: np.ndarray,
    point_index: np.ndarray,
    n_points: int,
) -> tuple[np.ndarray, np.ndarray]:
    """DLT for many points at once.

    Args:
        rotations, translations: ``(n_views, 3, 3)`` and ``(n_views, 3)`` poses.
        normalized: ``(n_obs, 2)`` observations in normalised camera
            coordinates (``K^-1`` applied).
        view_index, point_index: per-observation view and point ids.
        n_points: number of points.

    Returns:
        ``(points, ok)`` where ``ok`` flags well-conditioned systems.
    """
    P = np.concatenate([rotations, translations[:, :, None]], axis=2)[view_index]
    r1 = normalized[:, :1] * P[:, 2] - P[:, 0]
    r2 = normalized[:, 1:] * P[:, 2] - P[:, 1]
    r1 /= np.linalg.norm(r1, axis=1, keepdims=True)
    r2 /= np.linalg.norm(r2, axis=1, keepdims=True)
    outer = np.einsum("ni,nj->nij", r1, r1) + np.einsum("ni,nj->nij", r2, r2)
    M = np.zeros((n_points, 4, 4))
    np.add.at(M, point_index, outer)
    w, vec = np.linalg.eigh(M)
    X = vec[:, :, 0]
    ok = (w[:, 1] > 1e-14 * np.maximum(w[:, 3], 1e-300)) & (np.abs(X[:, 3]) > 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = X[:, :3] / X[:, 3:4]
    return pts, ok & np.all(np.isfinite(pts), axis=1)


# --- normals and shading --------------------------------------------------------


def estimate_normals(points, k: int = 16, viewpoints=None) -> np.ndarray:
    """Unit normals from the smallest principal axis of k-nearest neighbourhoods.

    Each normal is flipped to face the nearest of ``viewpoints`` (if given).
    Returns an ``(n, 3)`` array aligned with ``points``.
    """
    points = np.asarray(points, float)
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    nb = points[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vec = np.linalg.eigh(cov)
    normals = vec[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if viewpoints is not None and len(viewpoints):
        vp = np.asarray(viewpoints, float).reshape(-1, 3)
        d = np.linalg.norm(points[:, None] - vp[None], axis=2)
        nearest = vp[np.argmin(d, axis=1)]
        flip = np.einsum("ij,ij->i", normals, nearest - points) < 0
        normals[flip] *= -1
    return normals


def shading_factor(p_pro, p_k, n_k) -> float:
    """Irradiance factor of a near point light: ``max(0, (p_pro - p_k) . n_k / |p_pro - p_k|^3)``."""
    d = np.asarray(p_pro, float) - np.asarray(p_k, float)
    dist = np.linalg.norm(d)
    if dist == 0:
        raise ValueError("light position coincides with the surface point")
    return max(0.0, float(d @ np.asarray(n_k, float)) / dist**3)


def shading_factors(p_pro, points, normals) -> np.ndarray:
    """Vectorised :func:`shading_factor` for one light and many points."""
    d = np.asarray(p_pro, float)[None, :] - np.asarray(points, float)
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist == 0):
        raise ValueError("light position coincides with a surface point")
    return np.maximum(0.0, np.einsum("ij,ij->i", d, normals) / dist**3)


# --- ray casting ----------------------------------------------------------------


def ray_triangle_distances(origins, directions, corners, eps: float = 1e-15) -> np.ndarray:
    """Moller-Trumbore ray parameters for every (ray, triangle) pair.

    Returns an ``(n_rays, n_tri)`` array of hit distances ``t`` (in units of
    the direction length), ``inf`` where the ray misses.
    """
    o = np.asarray(origins, float)[:, None, :]
    d = np.asarray(directions, float)[:, None, :]
    v0, v1, v2 = corners[None, :, 0], corners[None, :, 1], corners[None, :, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(d, e2)
    det = np.einsum("rti,rti->rt", np.broadcast_to(e1, pvec.shape), pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o - v0
    u = np.einsum("rti,rti->rt", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("rti,rti->rt", np.broadcast_to(d, qvec.shape), qvec) * inv
    t = np.einsum("rti,rti->rt", np.broadcast_to(e2, qvec.shape), qvec) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(hit, t, np.inf)


def segment_blocked_bruteforce(start, end, mesh: TriangleMesh) -> bool:
    """Reference occlusion test: does the open segment start->end cross any triangle?"""
    start = np.asarray(start, float)
    d = np.asarray(end, float) - start
    t = ray_triangle_distances(start[None], d[None], mesh.corners)[0]
    return bool(np.any(t < 1.0))


class _ViewIndex:
    """Triangles projected into one device image and binned into square tiles.

    A ray from the device centre through image point ``uv`` hits a triangle
    in front of the device iff the projected triangle contains ``uv``, so the
    per-tile candidate lists make ray casting exact for such rays.
    """

    def __init__(self, view: DeviceView, mesh: TriangleMesh, tile: int = 8):
        self.view = view
        self.tile = tile
        K = view.intrinsics
        X = view.pose.transform(mesh.vertices)
        z = X[:, 2]
        tri = mesh.triangles
        front = np.all(z[tri] > 1e-9, axis=1)
        self.behind = np.flatnonzero(~front)
        self.mesh = mesh
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.column_stack([K.fx * X[:, 0] / z + K.cx, K.fy * X[:, 1] / z + K.cy])
        ids = np.flatnonzero(front)
        puv = uv[tri[ids]]  # (m, 3, 2)
        self.uv0 = puv[:, 0]
        self.e1 = puv[:, 1] - puv[:, 0]
        self.e2 = puv[:, 2] - puv[:, 0]
        self.det = self.e1[:, 0] * self.e2[:, 1] - self.e1[:, 1] * self.e2[:, 0]
        self.invz = 1.0 / z[tri[ids]]
        self.ids = ids
        nx = int(np.ceil(K.width / tile)) + 1
        ny = int(np.ceil(K.height / tile)) + 1
        self.nx, self.ny = nx, ny
        lo = np.floor(puv.min(axis=1) / tile).astype(np.int64)
        hi = np.floor(puv.max(axis=1) / tile).astype(np.int64)
        lo = np.clip(lo, 0, [nx - 1, ny - 1])
        hi = np.clip(hi, 0, [nx - 1, ny - 1])
        nondeg = np.abs(self.det) > 0
        outside = (puv.max(axis=1) < 0).any(axis=1) | (puv[:, :, 0].min(axis=1) > K.width + tile) | (
            puv[:, :, 1].min(axis=1) > K.height + tile
        )
        use = np.flatnonzero(nondeg & ~outside)
        wx = hi[use, 0] - lo[use, 0] + 1
        wy = hi[use, 1] - lo[use, 1] + 1
        counts = wx * wy
        local = np.repeat(use, counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        tx = lo[local, 0] + offs % np.repeat(wx, counts)
        ty = lo[local, 1] + offs // np.repeat(wx, counts)
        tile_id = ty * nx + tx
        order = np.argsort(tile_id, kind="stable")
        self.cand = local[order]
        self.ptr = np.concatenate([[0], np.cumsum(np.bincount(tile_id, minlength=nx * ny))])

    def _tile_of(self, uv):
        tx = np.clip(np.floor(uv[:, 0] / self.tile).astype(np.int64), 0, self.nx - 1)
        ty = np.clip(np.floor(uv[:, 1] / self.tile).astype(np.int64), 0, self.ny - 1)
        return ty * self.nx + tx

    def nearest(self, uv: np.ndarray, limit_depth: np.ndarray | None = None, any_hit: bool = False):
        """Nearest triangle hit along rays through ``uv``.

        Returns ``(depth, triangle_id)``; depth is the device-frame z of the
        hit (``inf`` and ``-1`` on a miss). With ``limit_depth`` only hits
        strictly nearer than it count; ``any_hit`` stops at the first such hit.
        """
        n = len(uv)
        best = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)
        if limit_depth is None:
            limit_depth = np.full(n, np.inf)
        tiles = self._tile_of(uv)
        start = self.ptr[tiles]
        count = self.ptr[tiles + 1] - start
        active = np.flatnonzero(count > 0)
        j = 0
        while active.size:
            local = self.cand[start[active] + j]
            p = uv[active] - self.uv0[local]
            e1, e2, det = self.e1[local], self.e2[local], self.det[local]
            b1 = (p[:, 0] * e2[:, 1] - p[:, 1] * e2[:, 0]) / det
            b2 = (e1[:, 0] * p[:, 1] - e1[:, 1] * p[:, 0]) / det
            b0 = 1.0 - b1 - b2
            inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
            iz = self.invz[local]
            depth = 1.0 / (b0 * iz[:, 0] + b1 * iz[:, 1] + b2 * iz[:, 2])
            better = inside & (depth < best[active]) & (depth < limit_depth[active]) & (depth > 0)
            best[active[better]] = depth[better]
            best_id[active[better]] = self.ids[local[better]]
            j += 1
            keep = count[active] > j
            if any_hit:
                keep &= best_id[active] < 0
            active = active[keep]
        if self.behind.size:
            self._behind_fallback(uv, best, best_id, limit_depth)
        return best, best_id

    def _behind_fallback(self, uv, best, best_id, limit_depth):
        # triangles crossing the device plane: exact 3D test
        origins = np.broadcast_to(self.view.center, (len(uv), 3))
        dirs = pixel_rays(self.view, uv)
        corners = self.mesh.corners[self.behind]
        t = ray_triangle_distances(origins, dirs, corners)
        cosz = dirs @ self.view.pose.rotation[2]
        depth = t * cosz[:, None]
        depth[~np.isfinite(t)] = np.inf
        k = np.argmin(depth, axis=1)
        d = depth[np.arange(len(uv)), k]
        better = (d < best) & (d < limit_depth)
        best[better] = d[better]
        best_id[better] = self.behind[k[better]]


class RayCaster:
    """Mesh visibility queries from device centres, cached per view."""

    def __init__(self, mesh: TriangleMesh, tile: int | None = None):
        self.mesh = mesh
        self.tile = tile
        self._cache: dict = {}

    def _index(self, view: DeviceView) -> _ViewIndex:
        key = (view.id, view.pose.rotation.tobytes(), view.pose.translation.tobytes(), view.intrinsics)
        idx = self._cache.get(key)
        if idx is None:
            tile = self.tile
            if tile is None:
                # aim for a handful of triangles per tile at the mesh's density
                K = view.intrinsics
                tile = int(np.clip(round(2 * np.sqrt(K.width * K.height / max(len(self.mesh.triangles), 1))), 1, 16))
            idx = _ViewIndex(view, self.mesh, tile)
            self._cache[key] = idx
        return idx

    def cast(self, view: DeviceView, uv) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First surface hit through each pixel coordinate.

        Returns ``(points, depth, triangle_id)``; misses have ``depth = inf``.
        """
        uv = np.atleast_2d(np.asarray(uv, float))
        depth, tri = self._index(view).nearest(uv)
        K = view.intrinsics
        Xc = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))])
        with np.errstate(invalid="ignore"):
            Xc = Xc * depth[:, None]
            pts = (Xc - view.pose.translation) @ view.pose.rotation
        return pts, depth, tri

    def unobstructed(self, view: DeviceView, points) -> np.ndarray:
        """True where the segment from each point to the view centre hits no triangle.

        Points must be in front of the device; callers handle image bounds.
        """
        points = np.atleast_2d(np.asarray(points, float))
        uv, z = project_points(view, points)
        ok = z > 0
        out = np.zeros(len(points), dtype=bool)
        if ok.any():
            _, tri = self._index(view).nearest(uv[ok], limit_depth=z[ok], any_hit=True)
            out[np.flatnonzero(ok)] = tri < 0
        return out


def visibility_mask(
    points, normals, view: DeviceView, caster: RayCaster, eps: float
) -> np.ndarray:
    """Vectorised :func:`visible` over many oriented points."""
    points = np.atleast_2d(np.asarray(points, float))
    normals = np.atleast_2d(np.asarray(normals, float))
    uv, z = project_points(view, points)
    mask = (z > 0) & in_image(view, uv)
    if view.kind == PROJECTOR:
        mask &= shading_factors(view.center, points, normals) > 0
    idx = np.flatnonzero(mask)
    if idx.size:
        offset = points[idx] + eps * normals[idx]
        mask[idx] = caster.unobstructed(view, offset)
    return mask


def visible(point: OrientedPoint, view: DeviceView, mesh: TriangleMesh | RayCaster, eps: float) -> bool:
    """Whether ``point`` is seen by (camera) or lit by (projector) ``view``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    caster = mesh if isinstance(mesh, RayCaster) else RayCaster(mesh)
    return bool(visibility_mask(point.position[None], point.normal[None], view, caster, eps)[0])


def visible_pair_set(
    points,
    normals,
    pairs: Sequence[tuple[DeviceView, DeviceView]],
    mesh: TriangleMesh | RayCaster,
    eps: float,
) -> list[list[int]]:
    """Per point, indices of the (projector, camera) pairs that see it in both devices."""
    caster = mesh if isinstance(mesh, RayCaster) else RayCaster(mesh)
    points = np.atleast_2d(np.asarray(points, float))
    cache: dict[int, np.ndarray] = {}  # keyed by object: ids may repeat across poses

    def mask(view):
        if id(view) not in cache:
            cache[id(view)] = visibility_mask(points, normals, view, caster, eps)
        return cache[id(view)]

    table = np.column_stack([mask(p) & mask(c) for p, c in pairs]) if pairs else np.zeros((len(points), 0), bool)
    return [list(map(int, np.flatnonzero(row))) for row in table]
