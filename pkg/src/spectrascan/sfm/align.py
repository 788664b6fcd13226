"""Closed-form similarity alignment and pose comparison (evaluation only)."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateGeometryError
from ..geometry import DeviceView, Pose


def align_similarity(source, target, with_scale: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares ``(s, R, t)`` minimising ``sum |s R p + t - q|^2`` (Umeyama).

    Raises:
        DegenerateGeometryError: fewer than 3 points or collinear input.
    """
    P = np.asarray(source, float)
    Q = np.asarray(target, float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ValueError("source and target must be matching (n, 3) arrays")
    if len(P) < 3:
        raise DegenerateGeometryError("similarity alignment needs at least 3 points")
    mp, mq = P.mean(0), Q.mean(0)
    Pc, Qc = P - mp, Q - mq
    sp_ = np.linalg.svd(Pc, compute_uv=False)
    if sp_[1] <= 1e-10 * max(sp_[0], 1e-300):
        raise DegenerateGeometryError("points are collinear")
    C = Qc.T @ Pc / len(P)
    U, S, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var_p = (Pc**2).sum() / len(P)
    s = float(np.trace(np.diag(S) @ D) / var_p) if with_scale else 1.0
    t = mq - s * R @ mp
    return s, R, t


def transform_pose(pose: Pose, s: float, R: np.ndarray, t: np.ndarray) -> Pose:
    """Express a pose in the frame reached by ``q = s R p + t``."""
    Rn = pose.rotation @ R.T
    # rebuild an exactly orthonormal matrix to keep Pose validation happy
    u, _, vt = np.linalg.svd(Rn)
    Rn = u @ vt
    tn = s * pose.translation - Rn @ t
    return Pose(Rn, tn)


def rotation_angle(Ra, Rb) -> float:
    """Geodesic distance between two rotations in radians."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_errors(estimated: dict[str, DeviceView], truth: dict[str, DeviceView], s, R, t, scale: float | None = None):
    """Per-view rotation error (radians) and centre error relative to ``scale``.

    ``scale`` defaults to the RMS distance of the true device centres from
    their centroid.
    """
    ids = [k for k in estimated if k in truth]
    centers = np.array([truth[k].center for k in ids])
    if scale is None:
        scale = float(np.sqrt(((centers - centers.mean(0)) ** 2).sum(1).mean()))
    out = {}
    for k in ids:
        p = transform_pose(estimated[k].pose, s, R, t)
        out[k] = {
            "rotation": rotation_angle(p.rotation, truth[k].pose.rotation),
            "translation": float(np.linalg.norm(p.center - truth[k].center) / scale),
        }
    return out
