"""Weighted bundle adjustment: Levenberg-Marquardt with a Schur-complement solve.

Cost ``E = sum_i w_i * rho(|x_i - H(p_k)|^2)`` where ``w_i`` is the weight of
the observing device (1 for cameras, ``w_p`` for projectors) and ``rho`` is
the identity or a Huber function. Rotations are updated on the left,
``R <- exp([d]x) R``, so the derivative of the device-frame point ``X = R p + t``
is ``-[R p]x`` for the rotation increment and ``I`` for the translation.
Focal lengths are shared per device class; principal points stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from ..errors import OptimizationError


def skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, ``(..., 3) -> (..., 3, 3)``."""
    v = np.asarray(v, float)
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], -1),
            np.stack([v[..., 2], z, -v[..., 0]], -1),
            np.stack([-v[..., 1], v[..., 0], z], -1),
        ],
        -2,
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, float).reshape(-1, 3)).as_matrix().reshape(np.shape(w)[:-1] + (3, 3))


def project_observations(rotations, translations, focal, aspect, principal, points, obs_view, obs_point):
    """Predicted pixel positions ``(m, 2)`` and device-frame points ``(m, 3)``."""
    R = rotations[obs_view]
    Xc = np.einsum("mij,mj->mi", R, points[obs_point]) + translations[obs_view]
    f = focal[obs_view]
    inv_z = 1.0 / Xc[:, 2]
    u = f * Xc[:, 0] * inv_z + principal[obs_view, 0]
    v = f * aspect[obs_view] * Xc[:, 1] * inv_z + principal[obs_view, 1]
    return np.column_stack([u, v]), Xc


def observation_jacobians(rotations, translations, focal, aspect, principal, points, obs_view, obs_point):
    """Analytic derivatives of each predicted pixel.

    Returns:
        ``(J_pose (m, 2, 6), J_point (m, 2, 3), J_focal (m, 2))`` where the pose
        block is ordered ``[d_rotation (left increment), d_translation]``.
    """
    _, Xc = project_observations(rotations, translations, focal, aspect, principal, points, obs_view, obs_point)
    f = focal[obs_view]
    fy = f * aspect[obs_view]
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / Z
    dproj = np.zeros((len(Z), 2, 3))
    dproj[:, 0, 0] = f * iz
    dproj[:, 0, 2] = -f * X * iz**2
    dproj[:, 1, 1] = fy * iz
    dproj[:, 1, 2] = -fy * Y * iz**2
    R = rotations[obs_view]
    Rp = Xc - translations[obs_view]
    J_rot = -np.einsum("mij,mjk->mik", dproj, skew(Rp))
    J_pose = np.concatenate([J_rot, dproj], axis=2)
    J_point = np.einsum("mij,mjk->mik", dproj, R)
    J_focal = np.column_stack([X * iz, aspect[obs_view] * Y * iz])
    return J_pose, J_point, J_focal


@dataclass(eq=False)
class BAProblem:
    """Arrays for one bundle adjustment.

    ``focal_class[v]`` indexes the shared focal parameter of view ``v`` or is
    -1 to keep its focal length fixed. ``free_view[v]`` is False for gauge
    anchors. ``obs_weight`` holds the per-observation device weight.
    """

    rotations: np.ndarray
    translations: np.ndarray
    focal: np.ndarray
    aspect: np.ndarray
    principal: np.ndarray
    focal_class: np.ndarray
    free_view: np.ndarray
    points: np.ndarray
    obs_view: np.ndarray
    obs_point: np.ndarray
    obs_uv: np.ndarray
    obs_weight: np.ndarray
    huber_px: float | None = None
    fix_points: bool = False

    def copy(self) -> "BAProblem":
        out = BAProblem(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return out

    def residuals(self) -> np.ndarray:
        uv, Xc = project_observations(
            self.rotations, self.translations, self.focal, self.aspect, self.principal, self.points, self.obs_view, self.obs_point
        )
        r = uv - self.obs_uv
        r[~(Xc[:, 2] > 0)] = np.inf
        return r

    def robust_terms(self, r):
        """Per-observation cost contributions and IRLS weights."""
        e2 = np.einsum("ij,ij->i", r, r)
        if self.huber_px is None:
            return self.obs_weight * e2, self.obs_weight
        d = self.huber_px
        e = np.sqrt(e2)
        big = e > d
        rho = np.where(big, 2 * d * e - d * d, e2)
        with np.errstate(divide="ignore", invalid="ignore"):
            irls = np.where(big, d / e, 1.0)
        return self.obs_weight * rho, self.obs_weight * irls

    def cost(self) -> float:
        c, _ = self.robust_terms(self.residuals())
        return float(np.sum(c))

    @property
    def n_focal(self) -> int:
        return int(self.focal_class.max() + 1) if self.focal_class.size and self.focal_class.max() >= 0 else 0


@dataclass
class BAReport:
    history: list = field(default_factory=list)
    iterations: int = 0
    reason: str = ""

    @property
    def initial_cost(self) -> float:
        return self.history[0]

    @property
    def final_cost(self) -> float:
        return self.history[-1]


def _normal_equations(prob: BAProblem):
    """Weighted normal-equation blocks for the camera and point parameters."""
    r = prob.residuals()
    _, wts = prob.robust_terms(r)
    Jpose, Jpt, Jf = observation_jacobians(
        prob.rotations, prob.translations, prob.focal, prob.aspect, prob.principal, prob.points, prob.obs_view, prob.obs_point
    )
    sw = np.sqrt(wts)
    Jpose = Jpose * sw[:, None, None]
    Jpt = Jpt * sw[:, None, None]
    Jf = Jf * sw[:, None]
    rw = r * sw[:, None]
    m = len(r)
    n_free = int(prob.free_view.sum())
    free_idx = np.cumsum(prob.free_view) - 1
    nf = prob.n_focal
    nc = 6 * n_free + nf
    rows = np.arange(2 * m).reshape(m, 2)
    ri, ci, vals = [], [], []
    fv = prob.free_view[prob.obs_view]
    if fv.any():
        o = np.flatnonzero(fv)
        base = 6 * free_idx[prob.obs_view[o]]
        ri.append(np.repeat(rows[o][:, :, None], 6, axis=2).ravel())
        ci.append(np.broadcast_to((base[:, None] + np.arange(6))[:, None, :], (len(o), 2, 6)).ravel())
        vals.append(Jpose[o].ravel())
    fc = prob.focal_class[prob.obs_view]
    if nf:
        o = np.flatnonzero(fc >= 0)
        ri.append(rows[o].ravel())
        ci.append(np.repeat(6 * n_free + fc[o], 2))
        vals.append(Jf[o].ravel())
    if ri:
        Jc = sp.csr_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(2 * m, nc))
    else:
        Jc = sp.csr_matrix((2 * m, nc))
    n_pts = len(prob.points)
    Jp = sp.csr_matrix(
        (
            Jpt.ravel(),
            (np.repeat(rows[:, :, None], 3, axis=2).ravel(), (3 * prob.obs_point[:, None, None] + np.arange(3)).repeat(2, 1).ravel()),
        ),
        shape=(2 * m, 3 * n_pts),
    )
    rv = rw.ravel()
    U = (Jc.T @ Jc).toarray()
    W = (Jc.T @ Jp).tocsr()
    V = np.zeros((n_pts, 3, 3))
    np.add.at(V, prob.obs_point, np.einsum("mki,mkj->mij", Jpt, Jpt))
    gc = -(Jc.T @ rv)
    gp = -(Jp.T @ rv).reshape(n_pts, 3)
    return U, W, V, gc, gp


def _apply(prob: BAProblem, dc: np.ndarray, dp: np.ndarray) -> BAProblem:
    out = prob.copy()
    free = np.flatnonzero(prob.free_view)
    if free.size:
        d = dc[: 6 * free.size].reshape(-1, 6)
        out.rotations[free] = so3_exp(d[:, :3]) @ prob.rotations[free]
        out.translations[free] = prob.translations[free] + d[:, 3:]
    nf = prob.n_focal
    if nf:
        df = dc[6 * free.size :]
        has = prob.focal_class >= 0
        out.focal[has] = prob.focal[has] + df[prob.focal_class[has]]
    out.points = prob.points + dp
    return out


def solve_step(U, W, V, gc, gp, lam, fix_points=False):
    """Damped Schur-complement solve for (camera step, point step)."""
    nc = U.shape[0]
    n_pts = V.shape[0]
    dU = np.diag(U).copy()
    floor = 1e-12 * max(dU.max(initial=0.0), 1.0)
    Ud = U + np.diag(lam * np.maximum(dU, floor))
    if fix_points:
        return np.linalg.lstsq(Ud, gc, rcond=None)[0], np.zeros((n_pts, 3))
    dV = np.maximum(np.einsum("nii->ni", V), floor)
    Vd = V + lam * np.einsum("ni,ij->nij", dV, np.eye(3))
    Vinv = np.linalg.inv(Vd)
    Vinv_gp = np.einsum("nij,nj->ni", Vinv, gp).ravel()
    if nc:
        Vi = _block_diag(Vinv)
        S = Ud - (W @ Vi @ W.T).toarray()
        rhs = gc - W @ Vinv_gp
        try:
            dc = np.linalg.solve(S, rhs)
        except np.linalg.LinAlgError:
            dc = np.linalg.lstsq(S, rhs, rcond=None)[0]
        dp = Vinv_gp - (Vi @ (W.T @ dc))
    else:
        dc = np.zeros(0)
        dp = Vinv_gp
    return dc, dp.reshape(n_pts, 3)


def _block_diag(blocks):
    n = len(blocks)
    return sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(3 * n, 3 * n)).tocsr()


def levenberg_marquardt(
    prob: BAProblem,
    max_iterations: int = 200,
    rtol: float = 1e-10,
    lam0: float = 1e-3,
    max_retries: int = 15,
) -> tuple[BAProblem, BAReport]:
    """Minimise the weighted reprojection cost of ``prob``.

    Stops when the relative decrease of an accepted step falls below
    ``rtol``, after ``max_iterations`` accepted steps, or when no damped step
    lowers the cost (a stationary point at working precision). Accepted steps
    never increase the cost.
    """
    cost = prob.cost()
    report = BAReport(history=[cost])
    if not np.isfinite(cost):
        raise OptimizationError("initial bundle-adjustment cost is not finite", state=prob)
    lam = lam0
    for it in range(max_iterations):
        if cost == 0.0:
            report.reason = "zero cost"
            break
        U, W, V, gc, gp = _normal_equations(prob)
        accepted = False
        for _ in range(max_retries):
            dc, dp = solve_step(U, W, V, gc, gp, lam, prob.fix_points)
            cand = _apply(prob, dc, dp)
            new = cand.cost()
            if np.isfinite(new) and new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            report.reason = "stationary"
            break
        rel = (cost - new) / cost
        prob, cost = cand, new
        report.history.append(cost)
        report.iterations = it + 1
        lam = max(lam / 3.0, 1e-12)
        if rel < rtol:
            report.reason = "relative decrease below tolerance"
            break
    else:
        report.reason = "iteration limit"
    return prob, report
