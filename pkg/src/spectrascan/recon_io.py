"""Reconstruction files: a JSON document plus a PLY of the triangulated points.

Poses are stored as a unit quaternion ``[w, x, y, z]`` and a translation
(world to device, metric units when a scale reference was available).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import DeviceView, Intrinsics, Pose
from .imageio import read_json, write_json
from .plyio import write_points
from .sfm.tracks import SOURCE_CAMERA, SOURCE_PROJECTOR, TrackSet

RECON_FORMAT = "spectrascan-reconstruction/1"


def quaternion_wxyz(R) -> list[float]:
    x, y, z, w = Rotation.from_matrix(np.asarray(R)).as_quat()
    q = np.array([w, x, y, z])
    return (q if q[0] >= 0 else -q).tolist()


def rotation_from_wxyz(q) -> np.ndarray:
    w, x, y, z = q
    R = Rotation.from_quat([x, y, z, w]).as_matrix()
    u, _, vt = np.linalg.svd(R)
    return u @ vt


@dataclass(eq=False)
class LoadedReconstruction:
    """What downstream stages need from a saved reconstruction."""

    views: dict[str, DeviceView]
    registered: list[str]
    tracks: TrackSet
    track_ids: np.ndarray
    points: np.ndarray
    meta: dict


def save_reconstruction(directory, state, tracks: TrackSet, logbook=None, extra: dict | None = None) -> Path:
    """Write ``reconstruction.json`` and ``points.ply`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = state.metric_views()
    pts = state.metric_points()
    ptr = tracks.track_ptr
    track_docs = []
    for i in range(len(tracks)):
        obs = []
        for k in range(ptr[i], ptr[i + 1]):
            u, v = tracks.obs_uv[k]
            src = SOURCE_PROJECTOR if tracks.obs_native[k] else SOURCE_CAMERA
            obs.append([tracks.view_ids[tracks.obs_view[k]], float(u), float(v), src, bool(state.obs_active[k])])
        track_docs.append(
            {
                "id": i,
                "projectors": list(tracks.track_projectors[i]),
                "point": pts[i].tolist() if state.has_point[i] else None,
                "observations": obs,
            }
        )
    doc = {
        "format": RECON_FORMAT,
        "init_pair": list(state.init_pair or ()),
        "registered": list(state.registered),
        "w_p": state.w_p,
        "weighted_cost": state.weighted_cost(),
        "metric_scale": state.metric_scale,
        "n_points": state.n_points,
        "rms_error_px": {"all": state.rms_error(), "camera": state.rms_error("camera"), "projector": state.rms_error("projector")},
        "views": {
            vid: {
                "kind": view.kind,
                "intrinsics": view.intrinsics.to_dict(),
                "quaternion_wxyz": quaternion_wxyz(view.pose.rotation),
                "translation": view.pose.translation.tolist(),
            }
            for vid, view in views.items()
        },
        "track_views": {"ids": list(tracks.view_ids), "kinds": list(tracks.kinds)},
        "track_stats": tracks.stats,
        "tracks": track_docs,
    }
    if logbook is not None:
        doc["log"] = {"order": logbook.order, "skipped": logbook.skipped, "costs": logbook.costs}
    if extra:
        doc.update(extra)
    write_json(directory / "reconstruction.json", doc)
    write_points(directory / "points.ply", pts[state.has_point], extra={"track": np.flatnonzero(state.has_point).astype(float)})
    return directory / "reconstruction.json"


def load_reconstruction(path) -> LoadedReconstruction:
    """Read a reconstruction written by :func:`save_reconstruction` (file or directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "reconstruction.json"
    doc = read_json(path)
    if doc.get("format") != RECON_FORMAT:
        raise ValueError(f"{path}: not a reconstruction file")
    views = {}
    for vid, d in doc["views"].items():
        views[vid] = DeviceView(vid, d["kind"], Intrinsics(**d["intrinsics"]), Pose(rotation_from_wxyz(d["quaternion_wxyz"]), d["translation"]))
    view_ids = doc["track_views"]["ids"]
    index = {v: i for i, v in enumerate(view_ids)}
    ot, ov, ouv, onat = [], [], [], []
    pts, ids, projs = [], [], []
    for t in doc["tracks"]:
        projs.append(tuple(t["projectors"]))
        for vid, u, v, src, _active in t["observations"]:
            ot.append(t["id"])
            ov.append(index[vid])
            ouv.append((u, v))
            onat.append(src == SOURCE_PROJECTOR)
        if t["point"] is not None:
            ids.append(t["id"])
            pts.append(t["point"])
    tracks = TrackSet(
        view_ids=view_ids,
        kinds=doc["track_views"]["kinds"],
        obs_track=np.array(ot, np.int64),
        obs_view=np.array(ov, np.int64),
        obs_uv=np.array(ouv, float).reshape(-1, 2),
        obs_native=np.array(onat, bool),
        track_projectors=projs,
        stats=doc.get("track_stats", {}),
    )
    return LoadedReconstruction(
        views, list(doc["registered"]), tracks, np.array(ids, np.int64), np.array(pts, float).reshape(-1, 3), doc
    )
