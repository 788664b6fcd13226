import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spectrascan.datasets import default_basis, load_camera_sensitivity, projector_illuminants
from spectrascan.spectral_model import BasisModel, WavelengthGrid, forward_matrix, second_derivative_matrix
from spectrascan.spectral_solver import (
    ConditioningWarning,
    PairObservation,
    SpectralProblem,
    assemble_observations,
    band_subsets,
    baseline_solve,
    sample_bilinear,
    select_bands,
    solve_all,
    solve_from_statistics,
    solve_point,
    subset_rmse,
    sufficient_statistics,
)

PROPS = settings(max_examples=1000, deadline=None)

_G = WavelengthGrid()
_B = default_basis(_G)
_L = projector_illuminants(_G, 0.1)
_S = load_camera_sensitivity(_G)
_A = forward_matrix(_L, _S)
NE = 3 * len(_L)


def obs(c, y):
    return PairObservation(c, y, saturated=np.zeros(len(y), bool))


def _stacked_lstsq(ys, ss, gamma, basis=_B, mask=None):
    """Reference: explicit lstsq on the stacked, weighted system."""
    n = len(ys)
    M = _A @ basis.basis
    D = second_derivative_matrix(_G)
    rows = [s * M / np.sqrt(n) for s in ss]
    rhs = [(y - s * _A @ basis.mean) / np.sqrt(n) for y, s in zip(ys, ss)]
    if mask is not None:
        rows = [r[mask] for r in rows]
        rhs = [r[mask] for r in rhs]
    rows.append(np.sqrt(gamma) * D @ basis.basis)
    rhs.append(-np.sqrt(gamma) * D @ basis.mean)
    return np.linalg.lstsq(np.concatenate(rows), np.concatenate(rhs), rcond=None)[0]


def test_exact_recovery_with_true_shading(rng):
    alpha = rng.normal(0, 0.3, _B.n_basis)
    r = _B.basis @ alpha
    ss = [0.8, 0.3, 1.7]
    ys = [obs(c, s * _A @ r) for c, s in enumerate(ss)]
    est = solve_point(ys, ss, _B, _L, _S, gamma=0.0)
    np.testing.assert_allclose(est.reflectance.values, r, atol=1e-10)
    assert est.pairs_used == 3
    assert est.residual < 1e-20


def test_quarter_shading_baseline_bakes_in(rng):
    alpha = rng.normal(0, 0.3, _B.n_basis)
    r = _B.basis @ alpha
    est = baseline_solve(obs(0, 0.25 * _A @ r), _B, _L, _S, gamma=0.0)
    np.testing.assert_allclose(est.reflectance.values, 0.25 * r, atol=1e-10)


def test_baseline_equals_unit_shading_solve(rng):
    y = rng.uniform(0, 0.5, NE)
    a = baseline_solve(obs(2, y), _B, _L, _S, gamma=0.06)
    b = solve_point([obs(2, y)], [1.0], _B, _L, _S, gamma=0.06)
    np.testing.assert_array_equal(a.alpha, b.alpha)


def test_empty_observations_raise():
    with pytest.raises(ValueError):
        solve_point([], [], _B, _L, _S)
    with pytest.raises(ValueError):
        solve_point([obs(0, np.zeros(NE))], [1.0, 2.0], _B, _L, _S)


def test_zero_shading_leaves_point_unestimated():
    est = solve_point([obs(0, np.ones(NE) * 0.1)], [0.0], _B, _L, _S)
    assert not est.estimated and est.reflectance is None


def test_zero_observations_give_zero():
    est = solve_point([obs(0, np.zeros(NE)), obs(1, np.zeros(NE))], [0.5, 0.9], _B, _L, _S)
    np.testing.assert_allclose(est.alpha, 0, atol=1e-15)


def test_negative_gamma_rejected():
    with pytest.raises(ValueError):
        SpectralProblem(_B, _L, _S, -1.0)


def test_saturated_entries_are_masked(rng):
    alpha = rng.normal(0, 0.3, _B.n_basis)
    r = _B.basis @ alpha
    y = _A @ r
    y_bad = y.copy()
    y_bad[[0, 5, 20]] = 1.0  # clipped by the sensor
    o = PairObservation(0, y_bad)
    assert o.saturated[[0, 5, 20]].all() and o.saturated.sum() == 3
    est = solve_point([o], [1.0], _B, _L, _S, gamma=0.0)
    np.testing.assert_allclose(est.reflectance.values, r, atol=1e-9)


def test_rank_deficient_warns():
    # one intensity entry cannot determine 8 coefficients without the prior
    mask = np.zeros(NE, bool)
    mask[3] = True
    with pytest.warns(ConditioningWarning):
        est = solve_point([obs(0, np.full(NE, 0.2))], [1.0], _B, _L, _S, gamma=0.0, band_mask=mask)
    assert np.all(np.isfinite(est.alpha))


def test_statistics_path_matches_explicit(rng):
    ys = [PairObservation(c, rng.uniform(0, 1.0, NE)) for c in range(3)]
    ss = [0.4, 1.1, 0.7]
    w, z, q, n = sufficient_statistics(ys, ss, NE)
    prob = SpectralProblem(_B, _L, _S, 0.06)
    alpha, res = solve_from_statistics(prob, w, z, q)
    ref = solve_point(ys, ss, _B, _L, _S, 0.06)
    np.testing.assert_allclose(alpha[0], ref.alpha, rtol=1e-9, atol=1e-12)
    assert res[0] == pytest.approx(ref.residual, rel=1e-8, abs=1e-14)


def test_solve_all_matches_solve_point(rng):
    observations, shadings = [], []
    for k in range(40):
        pairs = sorted(rng.choice(6, rng.integers(0, 4), replace=False))
        observations.append([PairObservation(int(c), rng.uniform(0, 0.8, NE)) for c in pairs])
        shadings.append({int(c): float(rng.uniform(0, 2)) for c in pairs})
    for workers, chunk in ((1, 20000), (3, 7)):
        est = solve_all(observations, shadings, _B, _L, _S, 0.06, chunk=chunk, workers=workers)
        for o, s, e in zip(observations, shadings, est):
            if not o:
                assert not e.estimated
                continue
            ref = solve_point(o, [s[x.pair_index] for x in o], _B, _L, _S, 0.06)
            assert e.pairs_used == ref.pairs_used
            np.testing.assert_allclose(e.alpha, ref.alpha, rtol=1e-9, atol=1e-12)


# --- assembly ----------------------------------------------------------------------


def test_sample_bilinear_pixel_centres():
    img = np.arange(12.0).reshape(3, 4)
    assert sample_bilinear(img, [[0.5, 0.5]])[0] == 0
    assert sample_bilinear(img, [[2.5, 1.5]])[0] == img[1, 2]
    assert sample_bilinear(img, [[1.0, 0.5]])[0] == pytest.approx(0.5)


def test_assemble_illuminant_major(rng):
    imgs = rng.uniform(size=(7, 5, 6, 3))
    out = assemble_observations({4: np.array([[2.5, 3.5], [np.nan, np.nan]])}, {4: imgs}, [[4], [4]])
    assert len(out[0]) == 1 and out[1] == []
    np.testing.assert_allclose(out[0][0].y_obs, imgs[:, 3, 2, :].reshape(-1))


def test_assemble_missing_images():
    with pytest.raises(OSError):
        assemble_observations({0: np.array([[1.0, 1.0]])}, {}, [[0]])


# --- band selection -------------------------------------------------------------------


@pytest.fixture(scope="module")
def patches():
    rng = np.random.default_rng(9)
    truth = (_B.basis @ rng.normal(0, 0.3, (_B.n_basis, 6))).T + 0.3
    y = truth @ _A.T
    w = np.ones_like(y)
    return truth, w, y + rng.normal(0, 1e-3, y.shape)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_select_bands_matches_bruteforce(patches, k):
    truth, w, z = patches
    prob = SpectralProblem(_B, _L, _S, 0.06)
    best, best_rmse = select_bands(prob, w, z, truth, k, chunk=97)
    scores = [(subset_rmse(prob, w, z, truth, s), s) for s in band_subsets(NE, k)]
    ref_rmse = min(sc for sc, _ in scores)
    ref = next(s for sc, s in scores if sc == ref_rmse)
    assert best_rmse == pytest.approx(ref_rmse, rel=1e-9)
    assert subset_rmse(prob, w, z, truth, best) == pytest.approx(ref_rmse, rel=1e-9)
    assert best == ref or abs(subset_rmse(prob, w, z, truth, ref) - best_rmse) < 1e-12


def test_full_band_subset_equals_full_solve(patches):
    truth, w, z = patches
    prob = SpectralProblem(_B, _L, _S, 0.06)
    alpha, _ = solve_from_statistics(prob, w, z)
    full = float(np.mean(np.sqrt(np.mean((alpha @ _B.basis.T - truth) ** 2, axis=1))))
    assert subset_rmse(prob, w, z, truth, range(NE)) == pytest.approx(full, rel=1e-12)


def test_band_k_out_of_range():
    with pytest.raises(ValueError):
        list(band_subsets(NE, 0))
    with pytest.raises(ValueError):
        select_bands(SpectralProblem(_B, _L, _S), np.ones((1, NE)), np.ones((1, NE)), np.ones((1, _G.count)), NE + 1)


def test_band_mask_matches_subset_statistics(rng):
    y = rng.uniform(0, 0.5, NE)
    sub = (0, 4, 7, 11, 15, 19, 20)
    mask = np.zeros(NE, bool)
    mask[list(sub)] = True
    ref = solve_point([obs(0, y)], [0.6], _B, _L, _S, 0.06, band_mask=mask)
    w, z, _, _ = sufficient_statistics([obs(0, y)], [0.6], NE)
    alpha, _ = solve_from_statistics(SpectralProblem(_B, _L, _S, 0.06), w, z, band_mask=mask.astype(float))
    np.testing.assert_allclose(alpha[0], ref.alpha, rtol=1e-9, atol=1e-12)


# --- properties ------------------------------------------------------------------------

obs_vals = arrays(float, NE, elements=st.floats(0, 0.99))
shade = st.floats(1e-3, 3.0)


@PROPS
@given(st.lists(st.tuples(obs_vals, shade), min_size=1, max_size=4), st.floats(0, 1))
def test_normal_equation_residual(items, gamma):
    ys = [y for y, _ in items]
    ss = [s for _, s in items]
    est = solve_point([obs(c, y) for c, y in enumerate(ys)], ss, _B, _L, _S, gamma)
    # gradient of the energy vanishes at the minimiser
    n = len(ys)
    M = _A @ _B.basis
    G = second_derivative_matrix(_G) @ _B.basis
    grad = sum(s * M.T @ (s * M @ est.alpha - y) for y, s in zip(ys, ss)) / n + gamma * G.T @ G @ est.alpha
    scale = sum(s * np.abs(M.T @ y).max() for y, s in zip(ys, ss)) / n + 1e-12
    assert np.abs(grad).max() <= 1e-9 * max(scale, 1.0)


@PROPS
@given(obs_vals, shade, st.floats(0, 0.5), st.floats(0, 0.5))
def test_smoothness_monotone_in_gamma(y, s, g1, g2):
    lo, hi = sorted((g1, g2))
    D = second_derivative_matrix(_G)
    a = solve_point([obs(0, y)], [s], _B, _L, _S, lo).reflectance.values
    b = solve_point([obs(0, y)], [s], _B, _L, _S, hi).reflectance.values
    assert np.sum((D @ b) ** 2) <= np.sum((D @ a) ** 2) * (1 + 1e-7) + 1e-14


@PROPS
@given(obs_vals, shade, st.floats(0.01, 10))
def test_homogeneity(y, s, c):
    a = solve_point([obs(0, y)], [s], _B, _L, _S, 0.06).alpha
    b = solve_point([obs(0, c * y)], [s], _B, _L, _S, 0.06).alpha
    np.testing.assert_allclose(b, c * a, rtol=1e-8, atol=1e-12)


@PROPS
@given(arrays(float, 8, elements=st.floats(-1, 1)), st.lists(shade, min_size=1, max_size=4))
def test_in_span_recovery(alpha, ss):
    r = _B.basis @ alpha
    ys = [obs(c, s * _A @ r) for c, s in enumerate(ss)]
    est = solve_point(ys, ss, _B, _L, _S, 0.0)
    np.testing.assert_allclose(est.reflectance.values, r, atol=1e-8)


def test_mean_centred_basis(rng):
    model = default_basis(_G, center=True)
    r = model.basis @ rng.normal(0, 0.2, model.n_basis) + model.mean
    est = solve_point([obs(0, 0.5 * _A @ r)], [0.5], model, _L, _S, 0.0)
    np.testing.assert_allclose(est.reflectance.values, r, atol=1e-10)
