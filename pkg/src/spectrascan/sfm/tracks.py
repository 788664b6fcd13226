"""Cross-device correspondence graph built from decoded projector codes.

Every decoded projector pixel is a node keyed by ``(projector, code)``. The
camera images of one projector's code all observe the same surface point,
and the projector itself contributes an exact observation at the pixel
centre. Codes of different projectors are joined when a common camera sees
them less than ``merge_threshold_px`` apart; joining is transitive
(connected components of the merge graph).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ..geometry import CAMERA, PROJECTOR
from ..structured_light import FeatureSet

SOURCE_CAMERA = "camera-decoded"
SOURCE_PROJECTOR = "projector-native"


@dataclass(frozen=True)
class Observation:
    view_id: str
    position: tuple[float, float]
    source: str


@dataclass(frozen=True)
class FeatureTrack:
    track_id: int
    observations: tuple[Observation, ...]
    projectors: frozenset


@dataclass(eq=False)
class TrackSet:
    """All tracks as flat observation arrays sorted by (track, view).

    Attributes:
        view_ids: View names; ``obs_view`` indexes into this list.
        kinds: Device kind of each view.
        obs_track, obs_view: Track and view index of each observation.
        obs_uv: ``(m, 2)`` pixel positions.
        obs_native: True for projector-native observations.
        track_projectors: Originating projector ids of each track.
    """

    view_ids: list[str]
    kinds: list[str]
    obs_track: np.ndarray
    obs_view: np.ndarray
    obs_uv: np.ndarray
    obs_native: np.ndarray
    track_projectors: list[tuple[str, ...]]
    stats: dict

    def __len__(self) -> int:
        return len(self.track_projectors)

    @property
    def n_obs(self) -> int:
        return len(self.obs_track)

    def view_index(self, view_id: str) -> int:
        return self.view_ids.index(view_id)

    @property
    def track_ptr(self) -> np.ndarray:
        """CSR offsets: observations of track ``i`` are ``ptr[i]:ptr[i+1]``."""
        return np.concatenate([[0], np.cumsum(np.bincount(self.obs_track, minlength=len(self)))])

    def track(self, i: int) -> FeatureTrack:
        ptr = self.track_ptr
        obs = []
        for k in range(ptr[i], ptr[i + 1]):
            src = SOURCE_PROJECTOR if self.obs_native[k] else SOURCE_CAMERA
            u, v = self.obs_uv[k]
            obs.append(Observation(self.view_ids[self.obs_view[k]], (float(u), float(v)), src))
        return FeatureTrack(i, tuple(obs), frozenset(self.track_projectors[i]))

    def to_list(self) -> list[FeatureTrack]:
        return [self.track(i) for i in range(len(self))]

    def partition(self) -> set[frozenset]:
        """Tracks as sets of ``(view_id, u, v)``; independent of ordering."""
        out: dict[int, list] = {}
        for t, v, (u, w) in zip(self.obs_track, self.obs_view, self.obs_uv):
            out.setdefault(int(t), []).append((self.view_ids[v], round(float(u), 9), round(float(w), 9)))
        return {frozenset(x) for x in out.values()}

    def tracks_in_view(self, view_id: str) -> np.ndarray:
        return np.unique(self.obs_track[self.obs_view == self.view_index(view_id)])

    def multi_projector_fraction(self) -> float:
        if not len(self):
            return 0.0
        return float(np.mean([len(p) > 1 for p in self.track_projectors]))


def build_tracks(
    features: Mapping[tuple[str, str], FeatureSet],
    merge_threshold_px: float = 0.5,
    camera_only: bool = False,
) -> TrackSet:
    """Build feature tracks from per-pair decoded features.

    Args:
        features: ``{(projector_id, camera_id): FeatureSet}`` for every
            capture pair.
        merge_threshold_px: Codes of different projectors merge when a common
            camera sees them strictly closer than this.
        camera_only: Drop projector-native observations (tracks then need
            two cameras), the ablation without projector viewpoints.

    Conflicts: a merged component containing two codes of the same projector
    would give that projector two observations; such tracks are dropped. Two
    camera positions of one merged track in the same camera are averaged.
    """
    if merge_threshold_px <= 0:
        raise ValueError("merge_threshold_px must be positive")
    pairs = sorted(features)
    projectors = sorted({p for p, _ in pairs})
    cameras = sorted({c for _, c in pairs})
    if set(projectors) & set(cameras):
        raise ValueError("a view id cannot be both a projector and a camera")
    view_ids = cameras + projectors
    kinds = [CAMERA] * len(cameras) + [PROJECTOR] * len(projectors)
    vidx = {v: i for i, v in enumerate(view_ids)}

    # camera observations: (node key, camera, u, v)
    keys, cams, uvs = [], [], []
    stride = 1 << 32
    for p, c in pairs:
        fs = features[(p, c)]
        if len(fs) == 0:
            continue
        pi = projectors.index(p)
        keys.append(pi * stride + fs.codes[:, 0] * 65536 + fs.codes[:, 1])
        cams.append(np.full(len(fs), vidx[c]))
        uvs.append(fs.positions)
    if not keys:
        return _empty(view_ids, kinds)
    keys = np.concatenate(keys).astype(np.int64)
    cams = np.concatenate(cams)
    uvs = np.concatenate(uvs).astype(float)
    node_keys, node_of = np.unique(keys, return_inverse=True)
    n_nodes = len(node_keys)
    node_proj = node_keys // stride

    # merge edges across projectors within a common camera
    rows, cols = [], []
    for ci in np.unique(cams):
        sel = np.flatnonzero(cams == ci)
        tree = cKDTree(uvs[sel])
        pr = tree.query_pairs(merge_threshold_px, output_type="ndarray")
        if len(pr) == 0:
            continue
        a, b = sel[pr[:, 0]], sel[pr[:, 1]]
        d = np.linalg.norm(uvs[a] - uvs[b], axis=1)
        keep = (d < merge_threshold_px) & (node_proj[node_of[a]] != node_proj[node_of[b]])
        rows.append(node_of[a[keep]])
        cols.append(node_of[b[keep]])
    if rows:
        r, c = np.concatenate(rows), np.concatenate(cols)
    else:
        r = c = np.zeros(0, np.int64)
    graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(n_nodes, n_nodes))
    _, comp = connected_components(graph, directed=False)
    # order components by their smallest node key so numbering is input-order free
    first = np.full(comp.max() + 1, n_nodes)
    np.minimum.at(first, comp, np.arange(n_nodes))
    comp = np.argsort(np.argsort(first))[comp]
    n_comp = comp.max() + 1

    # conflict: two nodes of one projector in a component
    cp = comp * len(projectors) + node_proj
    uniq_cp, cp_counts = np.unique(cp, return_counts=True)
    bad = np.zeros(n_comp, bool)
    bad[uniq_cp[cp_counts > 1] // len(projectors)] = True

    obs_t, obs_v, obs_uv, obs_nat = [], [], [], []
    # camera observations, averaged per (component, camera)
    ct = comp[node_of]
    key = ct * len(view_ids) + cams
    uk, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
    mu = np.column_stack([np.bincount(inv, uvs[:, 0]), np.bincount(inv, uvs[:, 1])]) / cnt[:, None]
    obs_t.append(uk // len(view_ids))
    obs_v.append(uk % len(view_ids))
    obs_uv.append(mu)
    obs_nat.append(np.zeros(len(uk), bool))
    if not camera_only:
        code = node_keys % stride
        uv = np.column_stack([code // 65536 + 0.5, code % 65536 + 0.5]).astype(float)
        obs_t.append(comp)
        obs_v.append(len(cameras) + node_proj)
        obs_uv.append(uv)
        obs_nat.append(np.ones(n_nodes, bool))
    t = np.concatenate(obs_t)
    v = np.concatenate(obs_v)
    uv = np.concatenate(obs_uv)
    nat = np.concatenate(obs_nat)
    # for projector-native duplicates (bad tracks) the track is dropped anyway
    keep = ~bad[t]
    n_views_per = np.bincount(t[keep], minlength=n_comp)
    good = (~bad) & (n_views_per >= 2)
    keep &= good[t]
    t, v, uv, nat = t[keep], v[keep], uv[keep], nat[keep]
    renum = np.cumsum(good) - 1
    t = renum[t]
    order = np.lexsort((v, t))
    t, v, uv, nat = t[order], v[order], uv[order], nat[order]

    comp_projs: list[set] = [set() for _ in range(n_comp)]
    for cidx, pidx in zip(comp, node_proj):
        comp_projs[cidx].add(projectors[pidx])
    track_projectors = [tuple(sorted(comp_projs[i])) for i in np.flatnonzero(good)]
    stats = {
        "nodes": int(n_nodes),
        "components": int(n_comp),
        "conflicts_dropped": int(bad.sum()),
        "merges": int(len(r)),
    }
    return TrackSet(view_ids, kinds, t, v, uv, nat, track_projectors, stats)


def _empty(view_ids, kinds):
    z = np.zeros(0, np.int64)
    return TrackSet(view_ids, kinds, z, z, np.zeros((0, 2)), np.zeros(0, bool), [], {"nodes": 0})
