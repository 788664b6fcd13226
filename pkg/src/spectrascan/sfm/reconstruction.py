"""Incremental structure-from-motion over cameras and projectors.

Projectors are ordinary viewpoints whose observations are exact pixel
centres; the only difference from cameras is their weight in bundle
adjustment. Gauge: the first view of the initial pair (normally the first
camera) sits at the identity and the initial baseline has unit length.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import (
    DegenerateGeometryError,
    InitializationError,
    OptimizationError,
    RegistrationError,
)
from ..geometry import CAMERA, PROJECTOR, DeviceView, Intrinsics, Pose, triangulate_batch
from .bundle import BAProblem, BAReport, levenberg_marquardt
from .tracks import TrackSet
from .twoview import choose_pose, essential_ransac, pnp_ransac

log = logging.getLogger(__name__)


@dataclass
class SfMConfig:
    """Tunable constants of the reconstruction.

    Attributes:
        w_p: Bundle-adjustment weight of projector observations.
        refine_intrinsics: Refine one focal length per device class.
        intrinsics_min_views: Registered views needed before focal refinement.
        ransac_threshold_px: Essential-matrix inlier threshold.
        pnp_threshold_px: Registration inlier threshold.
        gate_px: Reprojection gate for new points and kept observations.
        min_angle_deg: Minimum triangulation angle of a new point.
        min_anchors: 2D-3D correspondences needed to register a view.
        huber_px: Huber threshold, or None for plain squared error.
        max_iterations, rtol: Bundle-adjustment stopping rule.
        seed: RANSAC seed.
    """

    w_p: float = 100.0
    refine_intrinsics: bool = True
    intrinsics_min_views: int = 3
    ransac_threshold_px: float = 1.0
    pnp_threshold_px: float = 2.0
    gate_px: float = 2.0
    min_angle_deg: float = 1.0
    min_anchors: int = 6
    huber_px: float | None = None
    max_iterations: int = 200
    rtol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.w_p < 1:
            raise ValueError("w_p must be at least 1")
        if self.huber_px is not None and self.huber_px <= 0:
            raise ValueError("huber_px must be positive")


def device_weight(kind: str, w_p: float) -> float:
    """Per-device weight: 1 for cameras, ``w_p`` for projectors."""
    if kind == CAMERA:
        return 1.0
    if kind == PROJECTOR:
        return float(w_p)
    raise ValueError(f"unknown device kind {kind!r}")


@dataclass(eq=False)
class ReconstructionState:
    """Tracks, their 3D points and the current device estimates.

    ``views`` holds every device (unregistered ones keep their initial
    guess); ``registered`` lists registered ids in registration order.
    ``obs_active`` masks observations rejected by reprojection gates.
    """

    tracks: TrackSet
    views: dict[str, DeviceView]
    registered: list[str]
    points: np.ndarray
    has_point: np.ndarray
    obs_active: np.ndarray
    w_p: float = 100.0
    cost: float = float("nan")
    init_pair: tuple[str, str] | None = None
    metric_scale: float | None = None
    reports: list = field(default_factory=list)

    def copy(self) -> "ReconstructionState":
        out = copy.copy(self)
        out.views = dict(self.views)
        out.registered = list(self.registered)
        out.points = self.points.copy()
        out.has_point = self.has_point.copy()
        out.obs_active = self.obs_active.copy()
        out.reports = list(self.reports)
        return out

    @property
    def n_points(self) -> int:
        return int(self.has_point.sum())

    def view_registered_mask(self) -> np.ndarray:
        reg = np.array([v in self.registered for v in self.tracks.view_ids])
        return reg[self.tracks.obs_view] if self.tracks.n_obs else np.zeros(0, bool)

    def used_observations(self) -> np.ndarray:
        """Observations entering the cost: active, registered view, triangulated track."""
        t = self.tracks
        return self.obs_active & self.view_registered_mask() & self.has_point[t.obs_track]

    def reprojection_errors(self) -> np.ndarray:
        """Pixel error of every observation (NaN where not applicable)."""
        t = self.tracks
        err = np.full(t.n_obs, np.nan)
        use = self.view_registered_mask() & self.has_point[t.obs_track]
        for vi, vid in enumerate(t.view_ids):
            sel = np.flatnonzero(use & (t.obs_view == vi))
            if sel.size == 0:
                continue
            view = self.views[vid]
            X = view.pose.transform(self.points[t.obs_track[sel]])
            K = view.intrinsics
            with np.errstate(divide="ignore", invalid="ignore"):
                uv = np.column_stack([K.fx * X[:, 0] / X[:, 2] + K.cx, K.fy * X[:, 1] / X[:, 2] + K.cy])
            e = np.linalg.norm(uv - t.obs_uv[sel], axis=1)
            e[~(X[:, 2] > 0)] = np.inf
            err[sel] = e
        return err

    def weighted_cost(self) -> float:
        err = self.reprojection_errors()
        use = self.used_observations()
        w = np.array([device_weight(k, self.w_p) for k in self.tracks.kinds])[self.tracks.obs_view]
        return float(np.sum(w[use] * err[use] ** 2))

    def rms_error(self, kind: str | None = None) -> float:
        err = self.reprojection_errors()
        use = self.used_observations()
        if kind is not None:
            kinds = np.array(self.tracks.kinds)[self.tracks.obs_view]
            use &= kinds == kind
        return float(np.sqrt(np.mean(err[use] ** 2))) if use.any() else float("nan")

    def registered_views(self) -> dict[str, DeviceView]:
        return {v: self.views[v] for v in self.registered}

    def metric_points(self) -> np.ndarray:
        return self.points * (self.metric_scale or 1.0)

    def metric_views(self) -> dict[str, DeviceView]:
        s = self.metric_scale or 1.0
        return {
            k: v.replace(pose=Pose(v.pose.rotation, v.pose.translation * s)) for k, v in self.registered_views().items()
        }


def _normalized(view: DeviceView, uv: np.ndarray) -> np.ndarray:
    K = view.intrinsics
    return np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy])


def _obs_in_view(tracks: TrackSet, view_id: str, active=None):
    """``{track: uv}`` arrays for one view: (track ids, obs indices)."""
    vi = tracks.view_index(view_id)
    sel = tracks.obs_view == vi
    if active is not None:
        sel &= active
    idx = np.flatnonzero(sel)
    return tracks.obs_track[idx], idx


def empty_state(tracks: TrackSet, intrinsics: dict[str, Intrinsics], w_p: float = 100.0) -> ReconstructionState:
    views = {}
    for vid, kind in zip(tracks.view_ids, tracks.kinds):
        if vid not in intrinsics:
            raise ValueError(f"no intrinsics for view {vid}")
        views[vid] = DeviceView(vid, kind, intrinsics[vid], Pose())
    n = len(tracks)
    return ReconstructionState(
        tracks,
        views,
        [],
        np.full((n, 3), np.nan),
        np.zeros(n, bool),
        np.ones(tracks.n_obs, bool),
        w_p,
    )


def initialize_pair(
    tracks: TrackSet,
    view_a: str,
    view_b: str,
    intrinsics_guess: dict[str, Intrinsics],
    config: SfMConfig | None = None,
) -> ReconstructionState:
    """Two-view bootstrap: essential matrix, relative pose, initial points.

    ``view_a`` is placed at the identity and ``view_b`` at unit distance.

    Raises:
        InitializationError: fewer than 8 shared tracks, or degenerate
            geometry (zero baseline or pure rotation).
    """
    config = config or SfMConfig()
    state = empty_state(tracks, intrinsics_guess, config.w_p)
    ta, ia = _obs_in_view(tracks, view_a)
    tb, ib = _obs_in_view(tracks, view_b)
    shared, pa, pb = np.intersect1d(ta, tb, return_indices=True)
    if len(shared) < 8:
        raise InitializationError(f"views {view_a} and {view_b} share {len(shared)} tracks; need at least 8")
    va, vb = state.views[view_a], state.views[view_b]
    x1 = _normalized(va, tracks.obs_uv[ia[pa]])
    x2 = _normalized(vb, tracks.obs_uv[ib[pb]])
    if np.max(np.abs(x1 - x2)) < 1e-12:
        raise InitializationError("identical observations in both views: zero baseline")
    rng = np.random.default_rng(config.seed)
    f = 0.5 * (va.intrinsics.fx + vb.intrinsics.fx)
    try:
        E, inl = essential_ransac(x1, x2, config.ransac_threshold_px / f, rng)
    except DegenerateGeometryError as exc:
        raise InitializationError(f"essential matrix estimation failed: {exc}") from exc
    R, t, _, front = choose_pose(E, x1[inl], x2[inl])
    if front.sum() < 8:
        raise InitializationError("too few points in front of both views")
    r1 = np.column_stack([x1[inl], np.ones(inl.sum())])
    r2 = np.column_stack([x2[inl], np.ones(inl.sum())]) @ R
    cosang = np.einsum("ij,ij->i", r1, r2) / np.linalg.norm(r1, axis=1) / np.linalg.norm(r2, axis=1)
    parallax = np.arccos(np.clip(cosang[front], -1, 1))
    if np.median(parallax) < 1e-3:
        raise InitializationError("insufficient parallax: zero baseline or pure rotation")
    t = t / np.linalg.norm(t)
    u, _, vt = np.linalg.svd(R)
    state.views[view_a] = va.replace(pose=Pose())
    state.views[view_b] = vb.replace(pose=Pose(u @ vt, t))
    state.registered = [view_a, view_b]
    state.init_pair = (view_a, view_b)
    # start from the RANSAC inliers, then alternate two-view refinement and
    # re-gating of every shared correspondence; the linear estimate is biased
    # for compact scenes, so the refined pose usually admits many more inliers
    outl = np.flatnonzero(~inl)
    state.obs_active[ia[pa[outl]]] = False
    state.obs_active[ib[pb[outl]]] = False
    # the inliers already passed an epipolar test; gating them on reprojection
    # against the unrefined linear pose would discard them all under noise
    triangulate_tracks(state, SfMConfig(**{**config.__dict__, "gate_px": np.inf}))
    polish = SfMConfig(**{**config.__dict__, "max_iterations": 30, "rtol": 1e-8})
    for _ in range(5):
        if state.n_points < 8:
            raise InitializationError("too few points survive two-view triangulation")
        state = bundle_adjust(state, config.w_p, False, polish)
        before = state.n_points
        state.obs_active[ia[pa]] = True
        state.obs_active[ib[pb]] = True
        state.has_point[:] = False
        triangulate_tracks(state, config)
        if state.n_points <= before:
            break
    state.cost = state.weighted_cost()
    return state


def triangulate_tracks(state: ReconstructionState, config: SfMConfig, retriangulate: bool = False) -> int:
    """Triangulate tracks with >= 2 active registered observations and no point.

    New points must lie in front of every observing registered view,
    reproject within ``gate_px`` and have a triangulation angle of at least
    ``min_angle_deg``. Returns the number of new points.
    """
    t = state.tracks
    reg = state.view_registered_mask() & state.obs_active
    counts = np.bincount(t.obs_track[reg], minlength=len(t))
    cand = (counts >= 2) & (retriangulate | ~state.has_point)
    sel = np.flatnonzero(reg & cand[t.obs_track])
    if sel.size == 0:
        return 0
    cand_ids = np.flatnonzero(cand)
    local = np.full(len(t), -1)
    local[cand_ids] = np.arange(cand_ids.size)
    vids = t.view_ids
    R = np.stack([state.views[v].pose.rotation for v in vids])
    T = np.stack([state.views[v].pose.translation for v in vids])
    fx = np.array([state.views[v].intrinsics.fx for v in vids])
    fy = np.array([state.views[v].intrinsics.fy for v in vids])
    cx = np.array([state.views[v].intrinsics.cx for v in vids])
    cy = np.array([state.views[v].intrinsics.cy for v in vids])
    ov = t.obs_view[sel]
    xn = np.column_stack([(t.obs_uv[sel, 0] - cx[ov]) / fx[ov], (t.obs_uv[sel, 1] - cy[ov]) / fy[ov]])
    pts, ok = triangulate_batch(R, T, xn, ov, local[t.obs_track[sel]], cand_ids.size)
    # gate: depth, reprojection and angle
    P = pts[local[t.obs_track[sel]]]
    Xc = np.einsum("mij,mj->mi", R[ov], P) + T[ov]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx[ov] * Xc[:, 0] / Xc[:, 2] + cx[ov]
        v = fy[ov] * Xc[:, 1] / Xc[:, 2] + cy[ov]
    err = np.hypot(u - t.obs_uv[sel, 0], v - t.obs_uv[sel, 1])
    bad_obs = ~(Xc[:, 2] > 0) | ~(err <= config.gate_px)
    bad = np.zeros(cand_ids.size, bool)
    np.logical_or.at(bad, local[t.obs_track[sel]], bad_obs)
    centers = np.stack([state.views[v].center for v in vids])
    rays = P - centers[ov]
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    # angle: compare each ray with the mean ray direction of its track
    mean = np.zeros((cand_ids.size, 3))
    np.add.at(mean, local[t.obs_track[sel]], rays)
    mean /= np.linalg.norm(mean, axis=1, keepdims=True)
    dev = np.arccos(np.clip(np.einsum("ij,ij->i", rays, mean[local[t.obs_track[sel]]]), -1, 1))
    spread = np.zeros(cand_ids.size)
    np.maximum.at(spread, local[t.obs_track[sel]], dev)
    good = ok & ~bad & (2 * spread >= np.radians(config.min_angle_deg))
    ids = cand_ids[good]
    state.points[ids] = pts[good]
    new = int((~state.has_point[ids]).sum())
    state.has_point[ids] = True
    return new


def _anchor_counts(state: ReconstructionState) -> dict[str, int]:
    t = state.tracks
    out = {}
    for vi, vid in enumerate(t.view_ids):
        if vid in state.registered:
            continue
        sel = (t.obs_view == vi) & state.obs_active
        out[vid] = int(state.has_point[t.obs_track[sel]].sum())
    return out


def register_view(state: ReconstructionState, view_id: str, config: SfMConfig | None = None) -> ReconstructionState:
    """Register one more view by RANSAC DLT-PnP plus pose refinement.

    Returns a new state with the view registered and newly observable tracks
    triangulated (no global bundle adjustment).

    Raises:
        RegistrationError: fewer than ``min_anchors`` reconstructed tracks
            are observed by the view, or PnP fails.
    """
    config = config or SfMConfig()
    if view_id in state.registered:
        raise RegistrationError(f"{view_id} is already registered")
    state = state.copy()
    t = state.tracks
    tr, idx = _obs_in_view(t, view_id, state.obs_active)
    has = state.has_point[tr]
    tr, idx = tr[has], idx[has]
    if len(tr) < config.min_anchors:
        raise RegistrationError(f"{view_id} observes {len(tr)} reconstructed tracks; need {config.min_anchors}")
    view = state.views[view_id]
    X = state.points[tr]
    x = _normalized(view, t.obs_uv[idx])
    rng = np.random.default_rng([config.seed, len(state.registered)])
    try:
        R, tt, inl = pnp_ransac(X, x, config.pnp_threshold_px / view.intrinsics.fx, rng)
    except DegenerateGeometryError as exc:
        raise RegistrationError(f"PnP failed for {view_id}: {exc}") from exc
    # pose-only refinement on the inliers
    K = view.intrinsics
    prob = BAProblem(
        rotations=R[None].copy(),
        translations=tt[None].copy(),
        focal=np.array([K.fx]),
        aspect=np.array([K.fy / K.fx]),
        principal=np.array([[K.cx, K.cy]]),
        focal_class=np.array([-1]),
        free_view=np.array([True]),
        points=X[inl].copy(),
        obs_view=np.zeros(int(inl.sum()), np.int64),
        obs_point=np.arange(int(inl.sum())),
        obs_uv=t.obs_uv[idx[inl]],
        obs_weight=np.ones(int(inl.sum())),
        huber_px=config.huber_px,
        fix_points=True,
    )
    prob, _ = levenberg_marquardt(prob, max_iterations=50, rtol=config.rtol)
    u, _, vt = np.linalg.svd(prob.rotations[0])
    state.views[view_id] = view.replace(pose=Pose(u @ vt, prob.translations[0]))
    state.registered.append(view_id)
    # gate anchors that disagree with the refined pose
    err = state.reprojection_errors()
    bad = idx[~(err[idx] <= config.gate_px)]
    state.obs_active[bad] = False
    triangulate_tracks(state, config)
    state.cost = state.weighted_cost()
    return state


def _class_focals(state: ReconstructionState) -> dict[str, float]:
    out = {}
    for kind in (CAMERA, PROJECTOR):
        fs = [state.views[v].intrinsics.fx for v in state.registered if state.views[v].kind == kind]
        if fs:
            out[kind] = float(np.mean(fs))
    return out


def bundle_adjust(
    state: ReconstructionState,
    w_p: float = 100.0,
    refine_intrinsics: bool = True,
    config: SfMConfig | None = None,
) -> ReconstructionState:
    """Global weighted bundle adjustment over all registered views and points.

    The first registered view is held fixed and the initial baseline is
    rescaled to unit length afterwards. Focal lengths are shared per device
    class (principal points fixed) when ``refine_intrinsics`` is set.

    Raises:
        ValueError: fewer than 2 registered views or ``w_p < 1``.
        OptimizationError: the cost is not finite; ``state`` carries the
            input state.
    """
    config = config or SfMConfig()
    if len(state.registered) < 2:
        raise ValueError("bundle adjustment needs at least two registered views")
    if w_p < 1:
        raise ValueError("w_p must be at least 1")
    t = state.tracks
    out = state.copy()
    out.w_p = w_p
    use = out.used_observations()
    obs = np.flatnonzero(use)
    reg = out.registered
    vpos = {v: i for i, v in enumerate(reg)}
    view_map = np.array([vpos.get(v, -1) for v in t.view_ids])
    pt_ids = np.flatnonzero(out.has_point)
    pt_map = np.full(len(t), -1)
    pt_map[pt_ids] = np.arange(pt_ids.size)
    views = [out.views[v] for v in reg]
    classes = {}
    if refine_intrinsics and len(reg) >= config.intrinsics_min_views:
        for v in views:
            classes.setdefault(v.kind, len(classes))
    prob = BAProblem(
        rotations=np.stack([v.pose.rotation for v in views]),
        translations=np.stack([v.pose.translation for v in views]),
        focal=np.array([v.intrinsics.fx for v in views]),
        aspect=np.array([v.intrinsics.fy / v.intrinsics.fx for v in views]),
        principal=np.array([[v.intrinsics.cx, v.intrinsics.cy] for v in views]),
        focal_class=np.array([classes.get(v.kind, -1) for v in views]),
        free_view=np.arange(len(views)) > 0,
        points=out.points[pt_ids].copy(),
        obs_view=view_map[t.obs_view[obs]],
        obs_point=pt_map[t.obs_track[obs]],
        obs_uv=t.obs_uv[obs],
        obs_weight=np.array([device_weight(v.kind, w_p) for v in views])[view_map[t.obs_view[obs]]],
        huber_px=config.huber_px,
    )
    # class focals start from their mean so the shared parameter is consistent
    for kind, c in classes.items():
        m = prob.focal_class == c
        prob.focal[m] = prob.focal[m].mean()
    try:
        prob, report = levenberg_marquardt(prob, config.max_iterations, config.rtol)
    except OptimizationError as exc:
        raise OptimizationError(str(exc), state=state) from exc
    # gauge: unit baseline between the initial pair
    a, b = out.init_pair if out.init_pair else (reg[0], reg[1])
    ca = -prob.rotations[vpos[a]].T @ prob.translations[vpos[a]]
    cb = -prob.rotations[vpos[b]].T @ prob.translations[vpos[b]]
    k = 1.0 / np.linalg.norm(cb - ca)
    for i, v in enumerate(views):
        u, _, vt = np.linalg.svd(prob.rotations[i])
        K = v.intrinsics.with_focal(prob.focal[i])
        out.views[v.id] = v.replace(intrinsics=K, pose=Pose(u @ vt, prob.translations[i] * k))
    out.points[pt_ids] = prob.points * k
    # propagate refined class focals to unregistered views of the same class
    for kind, c in classes.items():
        f = prob.focal[prob.focal_class == c][0]
        for vid, v in out.views.items():
            if v.kind == kind and vid not in vpos:
                out.views[vid] = v.replace(intrinsics=v.intrinsics.with_focal(f))
    out.reports.append(report)
    out.cost = out.weighted_cost()
    return out


def filter_outliers(state: ReconstructionState, gate_px: float) -> int:
    """Deactivate observations beyond ``gate_px``; drop points left with < 2 views."""
    err = state.reprojection_errors()
    bad = state.used_observations() & ~(err <= gate_px)
    state.obs_active[bad] = False
    t = state.tracks
    use = state.used_observations()
    counts = np.bincount(t.obs_track[use], minlength=len(t))
    lost = state.has_point & (counts < 2)
    state.has_point[lost] = False
    state.points[lost] = np.nan
    return int(bad.sum())


def readmit_observations(state: ReconstructionState, gate_px: float) -> int:
    """Reactivate rejected observations that now reproject within ``gate_px``.

    Gates applied against a pose that was later refined can reject good
    observations; without readmission a chain of registrations under noise
    starves of anchors.
    """
    err = state.reprojection_errors()
    back = ~state.obs_active & state.view_registered_mask() & state.has_point[state.tracks.obs_track] & (err <= gate_px)
    state.obs_active[back] = True
    return int(back.sum())


@dataclass
class ReconstructionLog:
    order: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    costs: list = field(default_factory=list)


def reconstruct(
    tracks: TrackSet,
    intrinsics: dict[str, Intrinsics],
    init_pair: tuple[str, str],
    config: SfMConfig | None = None,
) -> tuple[ReconstructionState, ReconstructionLog]:
    """Full incremental reconstruction with global bundle adjustment after each view.

    Next view: the unregistered view with the most 2D-3D anchors. Views that
    cannot be registered are skipped and reported in the log.
    """
    config = config or SfMConfig()
    logbook = ReconstructionLog()
    state = initialize_pair(tracks, init_pair[0], init_pair[1], intrinsics, config)
    logbook.order.extend(init_pair)
    state = _adjust(state, config)
    logbook.costs.append(state.cost)
    failed: set[str] = set()  # retried once another view has registered
    while True:
        counts = {k: v for k, v in _anchor_counts(state).items() if k not in failed}
        if not counts:
            break
        vid = max(sorted(counts), key=lambda k: counts[k])
        if counts[vid] < config.min_anchors:
            logbook.skipped.extend(sorted(counts))
            break
        try:
            state = register_view(state, vid, config)
        except RegistrationError as exc:
            log.warning("skipping %s: %s", vid, exc)
            failed.add(vid)
            logbook.skipped.append(vid)
            continue
        logbook.order.append(vid)
        failed.clear()
        state = _adjust(state, config)
        logbook.costs.append(state.cost)
        log.info("registered %s: %d points, cost %.3g", vid, state.n_points, state.cost)
    if triangulate_tracks(state, config):
        state = _adjust(state, config)
        logbook.costs.append(state.cost)
    logbook.skipped = sorted(set(tracks.view_ids) - set(state.registered))
    return state, logbook


def _adjust(state, config, rounds: int = 2):
    """Global BA, then outlier gating, readmission and new points until stable."""
    state = bundle_adjust(state, config.w_p, config.refine_intrinsics, config)
    for _ in range(rounds):
        changed = filter_outliers(state, config.gate_px)
        changed += readmit_observations(state, config.gate_px)
        changed += triangulate_tracks(state, config)
        if not changed:
            break
        state = bundle_adjust(state, config.w_p, config.refine_intrinsics, config)
    return state


def set_metric_scale(state: ReconstructionState, a: str, b: str, distance: float) -> None:
    """Record the factor mapping the unit-baseline gauge to metric units."""
    if a not in state.registered or b not in state.registered:
        state.metric_scale = None
        return
    d = np.linalg.norm(state.views[a].center - state.views[b].center)
    state.metric_scale = float(distance / d)
