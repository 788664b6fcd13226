"""Per-point spectral reflectance from multi-pair multispectral observations.

For point ``k`` seen by pairs ``c`` in its visibility set, with shading
factors ``s_c`` fixed by geometry, the estimate minimises

    E(alpha) = sum_c |m_c * (y_c - s_c A (B alpha + mu))|^2 / |V| + gamma |D (B alpha + mu)|^2

where ``A`` is the forward matrix, ``B``/``mu`` the basis model, ``D`` the
second difference and ``m_c`` masks saturated entries. The problem is a
convex quadratic in ``alpha``. Because ``A`` is shared by every pair it
reduces to two per-point vectors over the ``3 N_l`` intensity entries,

    w = sum_c s_c^2 m_c / |V|,    z = sum_c s_c m_c y_c / |V|,

which is what the batched solver and the exhaustive band search use.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .spectral_model import (
    BasisModel,
    IlluminationSet,
    SensitivityMatrix,
    SpectralCurve,
    forward_matrix,
    second_derivative_matrix,
)

DEFAULT_GAMMA = 0.06
SATURATION = 0.995
MIN_SHADING = 1e-6


class ConditioningWarning(UserWarning):
    """Normal equations are numerically rank deficient; minimum-norm solution used."""


@dataclass(frozen=True, eq=False)
class PairObservation:
    """Intensities of one point under every illuminant of one pair (illuminant-major)."""

    pair_index: int
    y_obs: np.ndarray
    saturated: np.ndarray | None = None

    def __post_init__(self):
        y = np.array(self.y_obs, dtype=float).reshape(-1)
        object.__setattr__(self, "y_obs", y)
        sat = y >= SATURATION if self.saturated is None else np.asarray(self.saturated, bool)
        object.__setattr__(self, "saturated", sat)


@dataclass(frozen=True, eq=False)
class SpectralEstimate:
    """Solver output for one point; ``reflectance`` is None when unestimated."""

    alpha: np.ndarray
    reflectance: SpectralCurve | None
    residual: float
    pairs_used: int

    @property
    def estimated(self) -> bool:
        return self.pairs_used > 0


@dataclass(frozen=True, eq=False)
class SpectralProblem:
    """Shared, immutable assets of the solver."""

    basis: BasisModel
    illum: IlluminationSet
    sens: SensitivityMatrix
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def A(self) -> np.ndarray:
        return forward_matrix(self.illum, self.sens)

    @property
    def M(self) -> np.ndarray:
        return self.A @ self.basis.basis

    @property
    def G(self) -> np.ndarray:
        return second_derivative_matrix(self.basis.grid) @ self.basis.basis

    @property
    def n_entries(self) -> int:
        return 3 * len(self.illum)


def _solve_normal(N: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (batched) symmetric systems, falling back to minimum norm when singular."""
    N = np.asarray(N)
    single = N.ndim == 2
    if single:
        N, b = N[None], b[None]
    out = np.empty(b.shape)
    sv = np.linalg.svd(N, compute_uv=False)
    bad = sv[:, -1] <= 1e-12 * np.maximum(sv[:, 0], 1e-300)
    good = ~bad
    if good.any():
        out[good] = np.linalg.solve(N[good], b[good][..., None])[..., 0]
    if bad.any():
        warnings.warn(
            f"{int(bad.sum())} rank-deficient spectral system(s); using the minimum-norm solution",
            ConditioningWarning,
            stacklevel=3,
        )
        out[bad] = np.einsum("nij,nj->ni", np.linalg.pinv(N[bad], rcond=1e-12, hermitian=True), b[bad])
    return out[0] if single else out


def sufficient_statistics(observations: Sequence[PairObservation], shadings: Sequence[float], n_entries: int):
    """``(w, z, q, n_pairs)`` of one point; pairs with shading < 1e-6 are skipped."""
    w = np.zeros(n_entries)
    z = np.zeros(n_entries)
    q = 0.0
    n = 0
    for obs, s in zip(observations, shadings):
        if len(obs.y_obs) != n_entries:
            raise ValueError(f"observation has {len(obs.y_obs)} entries, expected {n_entries}")
        if not s >= MIN_SHADING:
            continue
        m = ~obs.saturated
        w += s * s * m
        z += s * m * obs.y_obs
        q += float(np.sum(m * obs.y_obs**2))
        n += 1
    if n:
        w, z, q = w / n, z / n, q / n
    return w, z, q, n


def solve_from_statistics(problem: SpectralProblem, w, z, q=None, band_mask=None):
    """Batched minimiser from per-point statistics ``w, z`` of shape ``(n, 3 N_l)``.

    Returns ``(alpha, residual)``; residual is ``None`` unless ``q`` is given.
    """
    w = np.atleast_2d(w)
    z = np.atleast_2d(z)
    if band_mask is not None:
        w = w * band_mask
        z = z * band_mask
    A, M, G = problem.A, problem.M, problem.G
    mu = problem.basis.mean
    Amu = A @ mu
    Dmu = second_derivative_matrix(problem.basis.grid) @ mu
    N = np.einsum("ei,ne,ej->nij", M, w, M) + problem.gamma * (G.T @ G)
    rhs = (z - w * Amu) @ M - problem.gamma * (G.T @ Dmu)
    alpha = _solve_normal(N, rhs)
    residual = None
    if q is not None:
        pred = alpha @ M.T + Amu
        e_ren = np.asarray(q) - 2 * np.einsum("ne,ne->n", z, pred) + np.einsum("ne,ne,ne->n", pred, w, pred)
        smooth = alpha @ G.T + Dmu
        residual = np.maximum(e_ren, 0.0) + problem.gamma * np.einsum("ni,ni->n", smooth, smooth)
    return alpha, residual


def solve_point(
    observations: Sequence[PairObservation],
    shadings: Sequence[float],
    basis: BasisModel,
    illum: IlluminationSet,
    sens: SensitivityMatrix,
    gamma: float = DEFAULT_GAMMA,
    band_mask=None,
) -> SpectralEstimate:
    """Minimise the shading-aware spectral energy of one point.

    Builds the stacked least-squares system explicitly (independent of the
    batched statistics path).

    Args:
        observations: One :class:`PairObservation` per visible pair.
        shadings: Shading factor of the point for each of those pairs.
        basis, illum, sens: Basis model, illumination set, camera sensitivity.
        gamma: Weight of the second-derivative smoothness term.
        band_mask: Optional boolean mask over the ``3 N_l`` entries.

    Raises:
        ValueError: no observations, mismatched lengths or negative gamma.
    """
    if len(observations) == 0:
        raise ValueError("solve_point needs at least one observation")
    if len(observations) != len(shadings):
        raise ValueError("need one shading factor per observation")
    problem = SpectralProblem(basis, illum, sens, gamma)
    A, M, G = problem.A, problem.M, problem.G
    mu = basis.mean
    D = second_derivative_matrix(basis.grid)
    used = [(o, float(s)) for o, s in zip(observations, shadings) if s >= MIN_SHADING]
    n = len(used)
    if n == 0:
        nan = np.full(basis.n_basis, np.nan)
        return SpectralEstimate(nan, None, float("nan"), 0)
    rows, rhs = [], []
    for obs, s in used:
        m = ~obs.saturated
        if band_mask is not None:
            m = m & np.asarray(band_mask, bool)
        rows.append(s * M[m] / np.sqrt(n))
        rhs.append((obs.y_obs[m] - s * (A @ mu)[m]) / np.sqrt(n))
    if gamma > 0:
        rows.append(np.sqrt(gamma) * G)
        rhs.append(-np.sqrt(gamma) * (D @ mu))
    J = np.concatenate(rows)
    y = np.concatenate(rhs)
    alpha = _solve_normal(J.T @ J, J.T @ y)
    r = J @ alpha - y
    return SpectralEstimate(alpha, basis.reconstruct(alpha), float(r @ r), n)


def baseline_solve(
    observation: PairObservation,
    basis: BasisModel,
    illum: IlluminationSet,
    sens: SensitivityMatrix,
    gamma: float = DEFAULT_GAMMA,
) -> SpectralEstimate:
    """Shading-ignoring single-pair estimate (shading fixed to 1)."""
    return solve_point([observation], [1.0], basis, illum, sens, gamma)


# --- observation assembly ---------------------------------------------------------


def sample_bilinear(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample ``(H, W[, C])`` at pixel coordinates (pixel centres at ``i + 0.5``)."""
    uv = np.atleast_2d(uv)
    coords = np.stack([uv[:, 1] - 0.5, uv[:, 0] - 0.5])
    if image.ndim == 2:
        return map_coordinates(image, coords, order=1, mode="nearest")
    return np.stack([map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])], -1)


def assemble_observations(
    positions: dict[int, np.ndarray],
    color_images,
    visibility: Sequence[Sequence[int]],
) -> list[list[PairObservation]]:
    """Stack the colour samples of every point for each of its visible pairs.

    Args:
        positions: ``{pair_index: (n_points, 2)}`` camera pixel position of
            each point in that pair's camera (NaN where unknown).
        color_images: Callable or mapping giving ``(N_l, H, W, 3)`` linear
            images for a pair index.
        visibility: Per point, the pair indices of its visibility set.

    Returns:
        Per point, a list of :class:`PairObservation` (empty when the point is
        visible from no pair or has no position in those cameras).
    """
    n = len(visibility)
    out: list[list[PairObservation]] = [[] for _ in range(n)]
    by_pair: dict[int, list[int]] = {}
    for k, pairs in enumerate(visibility):
        for c in pairs:
            by_pair.setdefault(int(c), []).append(k)
    get = color_images if callable(color_images) else color_images.__getitem__
    for c in sorted(by_pair):
        pts = np.array(by_pair[c])
        uv = np.asarray(positions[c])[pts]
        ok = np.all(np.isfinite(uv), axis=1)
        pts, uv = pts[ok], uv[ok]
        if pts.size == 0:
            continue
        try:
            imgs = get(c)
        except (KeyError, FileNotFoundError, OSError) as exc:
            raise OSError(f"missing colour images for pair {c}: {exc}") from exc
        imgs = np.asarray(imgs)
        # (N_l, H, W, 3) -> (H, W, 3 N_l) in illuminant-major order
        stack = np.moveaxis(imgs, 0, 2).reshape(imgs.shape[1], imgs.shape[2], -1)
        y = sample_bilinear(stack, uv)
        for k, yk in zip(pts, y):
            out[k].append(PairObservation(c, yk))
    for obs in out:
        obs.sort(key=lambda o: o.pair_index)
    return out


def solve_all(
    observations: Sequence[Sequence[PairObservation]],
    shadings: Sequence[dict[int, float]],
    basis: BasisModel,
    illum: IlluminationSet,
    sens: SensitivityMatrix,
    gamma: float = DEFAULT_GAMMA,
    chunk: int = 20000,
    workers: int = 1,
) -> list[SpectralEstimate]:
    """Estimate every point; points with no usable pair are left unestimated.

    ``shadings[k]`` maps pair index to the shading factor of point ``k``.
    Chunks of points are independent, so ``workers > 1`` solves them on a
    thread pool; output order follows point order either way.
    """
    problem = SpectralProblem(basis, illum, sens, gamma)
    ne = problem.n_entries
    n = len(observations)
    W = np.zeros((n, ne))
    Z = np.zeros((n, ne))
    Q = np.zeros(n)
    used = np.zeros(n, np.int64)
    for k, obs in enumerate(observations):
        s = [shadings[k].get(o.pair_index, 0.0) for o in obs]
        W[k], Z[k], Q[k], used[k] = sufficient_statistics(obs, s, ne)
    alpha = np.full((n, basis.n_basis), np.nan)
    resid = np.full(n, np.nan)
    ok = np.flatnonzero(used > 0)
    blocks = [ok[i : i + chunk] for i in range(0, ok.size, chunk)]

    def run(sl):
        return sl, solve_from_statistics(problem, W[sl], Z[sl], Q[sl])

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    for sl, (a, r) in results:
        alpha[sl], resid[sl] = a, r
    refl = alpha @ basis.basis.T + basis.mean
    return [
        SpectralEstimate(alpha[k], SpectralCurve(basis.grid, refl[k]) if used[k] else None, float(resid[k]), int(used[k]))
        for k in range(n)
    ]


# --- band selection -----------------------------------------------------------------


def band_subsets(n_entries: int, k: int):
    if not 1 <= k <= n_entries:
        raise ValueError(f"k must be in [1, {n_entries}], got {k}")
    return itertools.combinations(range(n_entries), k)


def subset_rmse(problem: SpectralProblem, w, z, truth, subset) -> float:
    """Mean over patches of the spectral RMSE when only ``subset`` entries are used."""
    mask = np.zeros(problem.n_entries)
    mask[list(subset)] = 1.0
    alpha, _ = solve_from_statistics(problem, w, z, band_mask=mask)
    refl = alpha @ problem.basis.basis.T + problem.basis.mean
    return float(np.mean(np.sqrt(np.mean((refl - truth) ** 2, axis=1))))


def select_bands(
    problem: SpectralProblem,
    w: np.ndarray,
    z: np.ndarray,
    truth: np.ndarray,
    k: int,
    chunk: int = 4096,
) -> tuple[tuple[int, ...], float]:
    """Exhaustive search for the ``k``-entry subset with the lowest mean patch RMSE.

    Args:
        problem: Solver assets (basis, illumination, sensitivity, gamma).
        w, z: ``(n_patches, 3 N_l)`` pooled statistics of each patch.
        truth: ``(n_patches, N)`` reference reflectances.
        k: Number of intensity entries (bands) to keep.

    Ties are broken by the lexicographically first subset.
    """
    ne = problem.n_entries
    if not 1 <= k <= ne:
        raise ValueError(f"k must be in [1, {ne}], got {k}")
    w = np.atleast_2d(np.asarray(w, float))
    z = np.atleast_2d(np.asarray(z, float))
    truth = np.atleast_2d(truth)
    M, G = problem.M, problem.G
    B = problem.basis.basis
    mu = problem.basis.mean
    nb = B.shape[1]
    Amu = problem.A @ mu
    Dmu = second_derivative_matrix(problem.basis.grid) @ mu
    outer = np.einsum("ei,ej->eij", M, M).reshape(ne, nb * nb)
    # per-entry contributions: lhs (n_patches, ne, nb*nb), rhs (n_patches, ne, nb)
    lhs_e = w[:, :, None] * outer[None]
    rhs_e = (z - w * Amu)[:, :, None] * M[None]
    reg = (problem.gamma * (G.T @ G)).reshape(-1)
    reg_rhs = -problem.gamma * (G.T @ Dmu)
    best_rmse = np.inf
    best = None
    combos = band_subsets(ne, k)
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        S = np.zeros((len(block), ne))
        S[np.repeat(np.arange(len(block)), k), np.concatenate(block)] = 1.0
        N = (S @ lhs_e + reg).reshape(len(w), len(block), nb, nb)
        b = S @ rhs_e + reg_rhs
        alpha = _solve_normal(N.reshape(-1, nb, nb), b.reshape(-1, nb)).reshape(len(w), len(block), nb)
        refl = alpha @ B.T + mu
        rmse = np.sqrt(np.mean((refl - truth[:, None, :]) ** 2, axis=2)).mean(axis=0)
        i = int(np.argmin(rmse))
        if rmse[i] < best_rmse:
            best_rmse = float(rmse[i])
            best = tuple(int(x) for x in block[i])
    return best, best_rmse
