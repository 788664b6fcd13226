"""Minimal solvers: essential matrix, pose decomposition and DLT-PnP, with RANSAC.

All inputs are normalised image coordinates (``K^-1`` applied).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DegenerateGeometryError


def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return np.column_stack([x, np.ones(len(x))]) @ T.T, T


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Essential matrix from >= 8 normalised correspondences (``x2^T E x1 = 0``)."""
    if len(x1) < 8:
        raise DegenerateGeometryError("eight-point needs at least 8 correspondences")
    h1, T1 = _hartley(x1)
    h2, T2 = _hartley(x2)
    A = np.einsum("ni,nj->nij", h2, h1).reshape(-1, 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    E = T2.T @ F @ T1
    u, s, vt = np.linalg.svd(E)
    E = u @ np.diag([1.0, 1.0, 0.0]) @ vt
    return E / np.linalg.norm(E)


def sampson_distance(E, x1, x2) -> np.ndarray:
    """First-order geometric error (normalised units) of each correspondence."""
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.einsum("ni,ni->n", h2, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.abs(num) / np.sqrt(den)


def decompose_essential(E) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four ``(R, t)`` candidates, ``|t| = 1``."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = u @ W @ vt
    R2 = u @ W.T @ vt
    t = u[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate_two(R, t, x1, x2):
    """Midpoint-free linear triangulation for camera 1 at identity, camera 2 at (R, t)."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    A = np.stack(
        [
            x1[:, 0:1] * P1[2] - P1[0],
            x1[:, 1:2] * P1[2] - P1[1],
            x2[:, 0:1] * P2[2] - P2[0],
            x2[:, 1:2] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def choose_pose(E, x1, x2):
    """Candidate with most points in front of both cameras: ``(R, t, points, front)``."""
    best = None
    for R, t in decompose_essential(E):
        X = triangulate_two(R, t, x1, x2)
        z1 = X[:, 2]
        z2 = X @ R[2] + t[2]
        front = np.isfinite(z1) & (z1 > 0) & (z2 > 0)
        if best is None or front.sum() > best[3].sum():
            best = (R, t, X, front)
    return best


def _ransac_iters(inlier_ratio, sample, confidence, cap):
    if inlier_ratio <= 0:
        return cap
    p = inlier_ratio**sample
    if p >= 1 - 1e-12:
        return 1
    if p < 1e-12:
        return cap
    return min(cap, int(math.ceil(math.log(1 - confidence) / math.log(1 - p))))


def _local_refit(x1, x2, mask, threshold, rounds: int = 8):
    """Local optimisation: refit on the inliers until the set stops growing."""
    for _ in range(rounds):
        if mask.sum() < 8:
            break
        E = eight_point(x1[mask], x2[mask])
        new = sampson_distance(E, x1, x2) < threshold
        if new.sum() <= mask.sum():
            break
        mask = new
    return mask


def essential_ransac(x1, x2, threshold: float, rng, max_iters: int = 2000, confidence: float = 0.9999):
    """Robust essential matrix. ``threshold`` is a Sampson distance in normalised units.

    Returns ``(E, inlier_mask)`` with E refit on all inliers.
    """
    n = len(x1)
    if n < 8:
        raise DegenerateGeometryError("need at least 8 correspondences")
    best_mask = None
    it, needed = 0, max_iters
    while it < needed:
        sample = rng.choice(n, 8, replace=False)
        it += 1
        try:
            E = eight_point(x1[sample], x2[sample])
        except np.linalg.LinAlgError:
            continue
        mask = sampson_distance(E, x1, x2) < threshold
        if best_mask is None or mask.sum() > best_mask.sum():
            mask = _local_refit(x1, x2, mask, threshold)
            best_mask = mask
            needed = _ransac_iters(mask.mean(), 8, confidence, max_iters)
    if best_mask is None or best_mask.sum() < 8:
        raise DegenerateGeometryError("RANSAC found no consistent essential matrix")
    E = eight_point(x1[best_mask], x2[best_mask])
    mask = sampson_distance(E, x1, x2) < threshold
    if mask.sum() >= 8:
        E = eight_point(x1[mask], x2[mask])
    else:
        mask = best_mask
    return E, mask


def dlt_pnp(X: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Camera pose from >= 6 world points and normalised image points."""
    if len(X) < 6:
        raise DegenerateGeometryError("DLT-PnP needs at least 6 points")
    c = X.mean(axis=0)
    s = math.sqrt(3) / np.sqrt(((X - c) ** 2).sum(axis=1)).mean()
    Xn = (X - c) * s
    h, Tx = _hartley(x)
    Xh = np.column_stack([Xn, np.ones(len(X))])
    z = np.zeros_like(Xh)
    A = np.concatenate(
        [np.hstack([Xh, z, -h[:, :1] * Xh]), np.hstack([z, Xh, -h[:, 1:2] * Xh])]
    )
    _, sv, vt = np.linalg.svd(A)
    if sv[-2] < 1e-12 * sv[0]:
        raise DegenerateGeometryError("PnP configuration is degenerate")
    P = np.linalg.inv(Tx) @ vt[-1].reshape(3, 4)
    # undo the world normalisation: x ~ P [s(X - c); 1]
    S = np.eye(4)
    S[:3, :3] *= s
    S[:3, 3] = -s * c
    P = P @ S
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    u, sv, vt = np.linalg.svd(M)
    R = u @ vt
    scale = sv.mean()
    t = P[:, 3] / scale
    return R, t


def planar_pnp(X: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Camera pose from >= 4 (near-)coplanar world points via a plane homography."""
    if len(X) < 4:
        raise DegenerateGeometryError("planar PnP needs at least 4 points")
    c = X.mean(axis=0)
    U = np.linalg.svd((X - c).T)[0]
    if np.linalg.det(U) < 0:
        U[:, 2] = -U[:, 2]
    ab = (X - c) @ U[:, :2]
    ha, Ta = _hartley(ab)
    hx, Tx = _hartley(x)
    z = np.zeros_like(ha)
    A = np.concatenate(
        [np.hstack([ha, z, -hx[:, :1] * ha]), np.hstack([z, ha, -hx[:, 1:2] * ha])]
    )
    _, sv, vt = np.linalg.svd(A)
    if sv[-2] < 1e-12 * sv[0]:
        raise DegenerateGeometryError("planar PnP configuration is degenerate")
    H = np.linalg.inv(Tx) @ vt[-1].reshape(3, 3) @ Ta
    H = H / np.sqrt(np.linalg.norm(H[:, 0]) * np.linalg.norm(H[:, 1]))
    if H[2, 2] < 0:  # plane centre must lie in front of the camera
        H = -H
    r1, r2 = H[:, 0], H[:, 1]
    Rp = np.column_stack([r1, r2, np.cross(r1, r2)])
    u, _, vt = np.linalg.svd(Rp)
    Rp = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    R = Rp @ U.T
    t = H[:, 2] - R @ c
    return R, t


def _is_planar(X, tol: float = 1e-2) -> bool:
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    return sv[2] <= tol * sv[0]


def robust_pnp(X, x):
    """DLT for general configurations, the plane homography for flat ones."""
    return planar_pnp(X, x) if _is_planar(X) else dlt_pnp(X, x)


def pnp_ransac(X, x, threshold: float, rng, max_iters: int = 1000, confidence: float = 0.9999):
    """Robust PnP (DLT or planar homography per sample). ``threshold`` is a reprojection distance in normalised units."""
    n = len(X)
    if n < 6:
        raise DegenerateGeometryError("need at least 6 2D-3D correspondences")

    def errors(R, t):
        Xc = X @ R.T + t
        with np.errstate(divide="ignore", invalid="ignore"):
            e = np.linalg.norm(Xc[:, :2] / Xc[:, 2:3] - x, axis=1)
        e[~(Xc[:, 2] > 0)] = np.inf
        return e

    best = None
    it, needed = 0, max_iters
    while it < needed:
        it += 1
        sample = rng.choice(n, 6, replace=False)
        try:
            R, t = robust_pnp(X[sample], x[sample])
        except (DegenerateGeometryError, np.linalg.LinAlgError):
            continue
        mask = errors(R, t) < threshold
        if best is None or mask.sum() > best.sum():
            best, best_pose = mask, (R, t)
            needed = _ransac_iters(mask.mean(), 6, confidence, max_iters)
    if best is None or best.sum() < 6:
        raise DegenerateGeometryError("RANSAC found no consistent pose")
    R, t = robust_pnp(X[best], x[best])
    mask = errors(R, t) < threshold
    if mask.sum() < best.sum():
        # the all-inlier refit can be worse than the winning sample on flat scenes
        R, t = best_pose
        mask = best
    return R, t, mask
