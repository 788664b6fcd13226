"""Comparison of pipeline outputs with synthetic ground truth (evaluation only)."""

from __future__ import annotations

import numpy as np

from .geometry import DeviceView, RayCaster, TriangleMesh
from .sfm.align import align_similarity, pose_errors
from .sfm.tracks import TrackSet


def track_truth_points(tracks: TrackSet, track_ids, truth_views: dict[str, DeviceView], mesh: TriangleMesh | RayCaster):
    """Surface point behind each track.

    The projector-native observation sits at a projector pixel centre, so
    casting that ray through the true projector gives the exact surface
    point. Tracks without one (camera-only mode) use their first camera
    observation instead, which carries that feature's localisation error.
    Rows are NaN where the ray misses.
    """
    caster = mesh if isinstance(mesh, RayCaster) else RayCaster(mesh)
    track_ids = np.asarray(track_ids, np.int64)
    out = np.full((len(track_ids), 3), np.nan)
    pos = {int(t): i for i, t in enumerate(track_ids)}
    ptr = tracks.track_ptr
    # first native observation per track, else first observation
    chosen = {}
    for t in track_ids:
        lo, hi = ptr[t], ptr[t + 1]
        nat = np.flatnonzero(tracks.obs_native[lo:hi])
        chosen[int(t)] = lo + (nat[0] if nat.size else 0)
    by_view: dict[int, list[int]] = {}
    for t, o in chosen.items():
        if ptr[t + 1] > ptr[t]:
            by_view.setdefault(int(tracks.obs_view[o]), []).append(t)
    for vi, ts in by_view.items():
        view = truth_views[tracks.view_ids[vi]]
        obs = np.array([chosen[t] for t in ts])
        pts, depth, _ = caster.cast(view, tracks.obs_uv[obs])
        ok = np.isfinite(depth)
        rows = np.array([pos[t] for t in ts])
        out[rows[ok]] = pts[ok]
    return out


def align_points(points, truth_points):
    """Similarity taking estimated points onto their truth (finite rows only)."""
    ok = np.all(np.isfinite(points), axis=1) & np.all(np.isfinite(truth_points), axis=1)
    return align_similarity(points[ok], truth_points[ok])


def geometry_report(views: dict[str, DeviceView], points, track_ids, tracks: TrackSet, truth_views, mesh) -> dict:
    """Pose and point errors after aligning the points onto the truth.

    Point errors are relative to the mesh bounding-box diagonal; rotation
    errors are geodesic radians; translation errors are device-centre
    errors relative to the RMS spread of the true device centres.
    """
    diag = mesh.bbox_diagonal if isinstance(mesh, TriangleMesh) else mesh.mesh.bbox_diagonal
    truth_pts = track_truth_points(tracks, track_ids, truth_views, mesh)
    s, R, t = align_points(points, truth_pts)
    moved = s * points @ R.T + t
    d = np.linalg.norm(moved - truth_pts, axis=1) / diag
    d = d[np.isfinite(d)]
    per_view = pose_errors(views, truth_views, s, R, t)
    return {
        "n_points": int(len(points)),
        "n_views": len(views),
        "similarity": {"scale": float(s), "rotation": R.tolist(), "translation": t.tolist()},
        "point_rms": float(np.sqrt(np.mean(d**2))) if d.size else float("nan"),
        "point_max": float(d.max()) if d.size else float("nan"),
        "rotation_max": max((e["rotation"] for e in per_view.values()), default=float("nan")),
        "translation_max": max((e["translation"] for e in per_view.values()), default=float("nan")),
        "views": per_view,
    }


def assign_patches(points_truth_frame, patches: dict, height_tol: float = 0.005, margin: float = 0.0) -> np.ndarray:
    """Patch index of each point (or -1) from the chart layout ``{k: [x0, x1, y0, y1]}``."""
    P = np.asarray(points_truth_frame, float)
    out = np.full(len(P), -1, np.int64)
    for k, (x0, x1, y0, y1) in patches.items():
        m = (
            (P[:, 0] > x0 + margin)
            & (P[:, 0] < x1 - margin)
            & (P[:, 1] > y0 + margin)
            & (P[:, 1] < y1 - margin)
            & (np.abs(P[:, 2]) < height_tol)
        )
        out[m] = int(k)
    return out


def patch_rmse(reflectances, labels, truth: np.ndarray) -> np.ndarray:
    """RMSE of each patch's mean estimated spectrum against ``truth[k]`` (NaN if empty)."""
    R = np.asarray(reflectances, float)
    out = np.full(len(truth), np.nan)
    for k in range(len(truth)):
        sel = (labels == k) & np.all(np.isfinite(R), axis=1)
        if sel.any():
            out[k] = float(np.sqrt(np.mean((R[sel].mean(axis=0) - truth[k]) ** 2)))
    return out
