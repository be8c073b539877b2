"""Tests for the EM grid mixture fit and its closed-form M-step."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize

from grid_rectify.core import DetectionSet
from grid_rectify.errors import DegenerateFit, NoViableSpec
from grid_rectify.grid_fit import (
    SIGMA_FLOOR,
    GridParams,
    GridSpec,
    MixtureConfig,
    default_init,
    e_step,
    fit_grid,
    fit_grid_robust,
    grid_centers,
    m_step,
    nll,
    select_grid_dims,
)

MIX_VGA = MixtureConfig(alpha=0.8, uniform_c=640.0 * 480.0)


def detections(points, width=640, height=480):
    return DetectionSet(np.asarray(points, dtype=float), width, height)


def nll_oracle(X, params, spec, mix):
    """Direct high-precision evaluation of the negative log likelihood."""
    centers = grid_centers(params, spec)
    k = spec.n_components
    sx, sy = params.sigma
    norm = 1.0 / (2.0 * math.pi * math.sqrt(sx * sy))
    total = []
    for x, y in X.points:
        terms = [(1.0 - mix.alpha) / mix.uniform_c]
        for ux, uy in centers:
            dens = norm * math.exp(-0.5 * ((x - ux) ** 2 / sx + (y - uy) ** 2 / sy))
            terms.append(mix.alpha / k * dens)
        total.append(math.log(math.fsum(terms)))
    return -math.fsum(total)


def q_objective(X, gamma, spec, sigma):
    """Direct summation of the expected complete log likelihood objective.

    Returns a callable of the four mean parameters (ox, oy, dx, dy),
    independent of the closed-form solution path.
    """
    gi = spec.col_indices
    gj = spec.row_indices
    gamma_in = gamma[:, : spec.n_components]
    sx, sy = sigma
    log_det = math.log(sx * sy)

    def q(mean_params):
        ox, oy, dx, dy = mean_params
        value = 0.0
        for n, (x, y) in enumerate(X.points):
            ex = x - (ox + dx * gi)
            ey = y - (oy + dy * gj)
            value += float(
                (gamma_in[n] * (ex**2 / sx + ey**2 / sy + log_det)).sum()
            )
        return value

    return q


def q_mean_gradient(X, gamma, spec, params):
    """Analytic gradient of Q w.r.t. (ox, oy, dx, dy) at given params."""
    gi = spec.col_indices
    gj = spec.row_indices
    g = gamma[:, : spec.n_components]
    ex = X.points[:, 0:1] - (params.origin[0] + params.spacing[0] * gi)[None, :]
    ey = X.points[:, 1:2] - (params.origin[1] + params.spacing[1] * gj)[None, :]
    sx, sy = params.sigma
    return np.array(
        [
            -2.0 * (g * ex).sum() / sx,
            -2.0 * (g * ey).sum() / sy,
            -2.0 * (g * ex * gi[None, :]).sum() / sx,
            -2.0 * (g * ey * gj[None, :]).sum() / sy,
        ]
    )


def sample_instance(rng, rows=5, cols=3, noise=1.0, n_outliers=2):
    """Random fronto-parallel panel instance with known truth."""
    spec = GridSpec(rows, cols)
    spacing = rng.uniform(60.0, 110.0, size=2)
    origin = rng.uniform(60.0, 140.0, size=2)
    truth = GridParams(origin, spacing, (1.0, 1.0))
    pts = grid_centers(truth, spec) + rng.normal(0.0, noise, size=(spec.n_components, 2))
    if n_outliers:
        outliers = rng.uniform([0, 0], [640, 480], size=(n_outliers, 2))
        pts = np.vstack([pts, outliers])
    return detections(pts[rng.permutation(len(pts))]), spec, truth


class TestGridSpec:
    def test_row_major_enumeration(self):
        spec = GridSpec(2, 3)
        np.testing.assert_array_equal(spec.col_indices, [0, 1, 2, 0, 1, 2])
        np.testing.assert_array_equal(spec.row_indices, [0, 0, 0, 1, 1, 1])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            GridSpec(0, 2)


class TestGridCenters:
    def test_two_by_two(self):
        params = GridParams((0.0, 0.0), (100.0, 100.0), (1.0, 1.0))
        out = grid_centers(params, GridSpec(2, 2))
        np.testing.assert_array_equal(out, [[0, 0], [100, 0], [0, 100], [100, 100]])

    def test_five_by_three_last_center(self):
        params = GridParams((50.0, 80.0), (100.0, 100.0), (1.0, 1.0))
        out = grid_centers(params, GridSpec(rows=5, cols=3))
        assert out.shape == (15, 2)
        np.testing.assert_array_equal(out[-1], [250.0, 480.0])

    def test_single_cell(self):
        params = GridParams((12.5, -3.0), (40.0, 40.0), (1.0, 1.0))
        out = grid_centers(params, GridSpec(1, 1))
        np.testing.assert_array_equal(out, [[12.5, -3.0]])


class TestNll:
    def test_peak_of_unit_variance_gaussian(self):
        params = GridParams((100.0, 100.0), (50.0, 50.0), (1.0, 1.0))
        X = detections([[100.0, 100.0]])
        out = nll(X, params, GridSpec(1, 1), MixtureConfig(alpha=1.0))
        assert abs(out - (-math.log(1.0 / (2.0 * math.pi)))) < 1e-12

    def test_pure_uniform_component(self):
        params = GridParams((0.0, 0.0), (50.0, 50.0), (1.0, 1.0))
        X = detections([[10.0, 20.0]])
        out = nll(X, params, GridSpec(1, 1), MixtureConfig(alpha=0.0))
        assert abs(out - math.log(640 * 480)) < 1e-12

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            X, spec, truth = sample_instance(rng, noise=8.0)
            params = GridParams(
                truth.origin + rng.normal(0, 5, 2),
                truth.spacing * rng.uniform(0.8, 1.2, 2),
                rng.uniform(10, 400, 2),
            )
            ours = nll(X, params, spec, MIX_VGA)
            ref = nll_oracle(X, params, spec, MIX_VGA)
            assert abs(ours - ref) < 1e-10 * abs(ref)

    def test_underflow_raises_for_alpha_one(self):
        params = GridParams((0.0, 0.0), (50.0, 50.0), (1.0, 1.0))
        X = detections([[1e160, 0.0]])
        with pytest.raises(ArithmeticError):
            nll(X, params, GridSpec(1, 1), MixtureConfig(alpha=1.0))


class TestEStep:
    def test_single_component_no_outlier_mass(self):
        params = GridParams((100.0, 100.0), (50.0, 50.0), (1.0, 1.0))
        gamma = e_step(
            detections([[100.0, 100.0]]), params, GridSpec(1, 1), MixtureConfig(alpha=1.0)
        )
        np.testing.assert_allclose(gamma, [[1.0, 0.0]], atol=1e-300)

    def test_equidistant_symmetry(self):
        params = GridParams((0.0, 0.0), (100.0, 100.0), (4.0, 4.0))
        gamma = e_step(
            detections([[50.0, 0.0]]), params, GridSpec(1, 2), MixtureConfig(alpha=1.0)
        )
        assert abs(gamma[0, 0] - gamma[0, 1]) < 1e-12
        assert abs(gamma.sum() - 1.0) < 1e-10

    def test_far_point_is_outlier(self):
        # 50 sigma from every center with alpha = 0.8
        params = GridParams((0.0, 0.0), (10.0, 10.0), (1.0, 1.0))
        gamma = e_step(detections([[0.0, 50.0]]), params, GridSpec(1, 1), MIX_VGA)
        # direct density-ratio oracle
        dens = 1.0 / (2.0 * math.pi) * math.exp(-0.5 * 50.0**2)
        expected_out = (0.2 / MIX_VGA.uniform_c) / (
            0.2 / MIX_VGA.uniform_c + 0.8 * dens
        )
        assert gamma[0, 1] > 0.999
        np.testing.assert_allclose(gamma[0, 1], expected_out, rtol=1e-12)

    def test_rows_sum_to_one_and_bounded(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            X, spec, truth = sample_instance(rng, noise=15.0)
            params = GridParams(truth.origin, truth.spacing, (50.0, 50.0))
            gamma = e_step(X, params, spec, MIX_VGA)
            assert gamma.shape == (len(X), spec.n_components + 1)
            assert (gamma >= 0).all() and (gamma <= 1).all()
            np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-10)


def hard_gamma(labels, n, k):
    gamma = np.zeros((n, k + 1))
    for i, lab in enumerate(labels):
        gamma[i, lab] = 1.0
    return gamma


class TestMStep:
    def test_exact_recovery_from_hard_assignments(self):
        spec = GridSpec(3, 3)
        truth = GridParams((10.0, 20.0), (50.0, 60.0), (1.0, 1.0))
        X = detections(grid_centers(truth, spec))
        gamma = hard_gamma(range(9), 9, 9)
        prev = GridParams((0.0, 0.0), (40.0, 40.0), (100.0, 100.0))
        out = m_step(X, gamma, spec, prev)
        np.testing.assert_allclose(out.origin, truth.origin, atol=1e-9)
        np.testing.assert_allclose(out.spacing, truth.spacing, atol=1e-9)
        np.testing.assert_array_equal(out.sigma, [SIGMA_FLOOR, SIGMA_FLOOR])

    def test_noisy_grid_monte_carlo(self):
        # 95th percentile of |estimate - truth| over 100 seeds within 1 px
        spec = GridSpec(10, 20)  # 200 points
        truth = GridParams((50.0, 40.0), (25.0, 22.0), (4.0, 4.0))
        clean = grid_centers(truth, spec)
        origin_err, spacing_err = [], []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            X = detections(clean + rng.normal(0, 2.0, clean.shape))
            gamma = hard_gamma(range(200), 200, 200)
            out = m_step(X, gamma, spec, truth)
            origin_err.append(np.abs(out.origin - truth.origin).max())
            spacing_err.append(np.abs(out.spacing - truth.spacing).max())
        assert np.percentile(origin_err, 95) < 1.0
        assert np.percentile(spacing_err, 95) < 1.0

    def test_matches_numerical_q_minimizer(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            X, spec, truth = sample_instance(rng, rows=5, cols=2, noise=6.0, n_outliers=0)
            params0 = GridParams(truth.origin, truth.spacing, (60.0, 60.0))
            gamma = e_step(X, params0, spec, MIX_VGA)
            out = m_step(X, gamma, spec, params0)
            q = q_objective(X, gamma, spec, out.sigma)
            start = np.concatenate([out.origin + 3.0, out.spacing + 2.0])
            ref = minimize(q, start, method="Powell", options={"xtol": 1e-12, "ftol": 1e-14})
            ours = np.concatenate([out.origin, out.spacing])
            np.testing.assert_allclose(ours, ref.x, atol=1e-6)

    def test_stationary_point_gradient(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            X, spec, truth = sample_instance(rng, noise=10.0)
            gamma = e_step(X, GridParams(truth.origin, truth.spacing, (80.0, 80.0)), spec, MIX_VGA)
            out = m_step(X, gamma, spec, truth)
            grad = q_mean_gradient(X, gamma, spec, out)
            assert np.linalg.norm(grad) < 1e-6

    def test_degenerate_gamma_raises(self):
        spec = GridSpec(2, 2)
        X = detections([[0, 0], [1, 1], [2, 2], [3, 3]])
        gamma = np.zeros((4, 5))
        gamma[:, 4] = 1.0  # everything assigned to the outlier column
        with pytest.raises(DegenerateFit):
            m_step(X, gamma, spec, GridParams((0, 0), (1, 1), (1, 1)))

    def test_paper_literal_sigma_normalization(self):
        rng = np.random.default_rng(40)
        spec = GridSpec(3, 3)
        truth = GridParams((10.0, 10.0), (50.0, 50.0), (1.0, 1.0))
        pts = grid_centers(truth, spec) + rng.normal(0, 3.0, (9, 2))
        X = detections(pts)
        gamma = hard_gamma(range(9), 9, 9)
        mass = m_step(X, gamma, spec, truth, sigma_norm="inlier_mass")
        count = m_step(X, gamma, spec, truth, sigma_norm="point_count")
        # with full inlier mass = N the two normalizers coincide
        np.testing.assert_allclose(mass.sigma, count.sigma, atol=1e-12)
        # with diluted responsibilities they differ by exactly mass / N
        gamma_soft = gamma.copy()
        gamma_soft[:, :9] *= 0.5
        gamma_soft[:, 9] = 0.5
        mass = m_step(X, gamma_soft, spec, truth, sigma_norm="inlier_mass")
        count = m_step(X, gamma_soft, spec, truth, sigma_norm="point_count")
        assert (np.array(mass.sigma) > 1e-3).all()  # clamp not active
        np.testing.assert_allclose(
            np.array(count.sigma) / np.array(mass.sigma), 0.5, rtol=1e-12
        )

    def test_unknown_sigma_norm_rejected(self):
        spec = GridSpec(2, 2)
        X = detections([[0, 0], [10, 0], [0, 10], [10, 10]])
        with pytest.raises(ValueError, match="sigma_norm"):
            m_step(X, hard_gamma(range(4), 4, 4), spec,
                   GridParams((0, 0), (10, 10), (1, 1)), sigma_norm="bogus")

    def test_singular_axis_keeps_previous_spacing(self):
        spec = GridSpec(2, 1)  # single column: all i_k equal
        X = detections([[10.0, 0.0], [10.0, 50.0], [10.0, 100.0], [10.0, 150.0]])
        gamma = np.zeros((4, 3))
        gamma[:2, 0] = 1.0
        gamma[2:, 1] = 1.0
        prev = GridParams((0.0, 0.0), (77.0, 60.0), (25.0, 25.0))
        out = m_step(X, gamma, spec, prev)
        assert out.spacing[0] == 77.0  # x axis kept
        assert abs(out.origin[0] - 10.0) < 1e-9


class TestFitGrid:
    def test_protocol_defaults_on_synthetic_panel(self):
        # alpha 0.8, origin at top-left detection, spacing (100,100), sigma (640,640)
        rng = np.random.default_rng(14)
        spec = GridSpec(5, 3)
        truth = GridParams((170.0, 40.0), (100.0, 100.0), (1.0, 1.0))
        pts = grid_centers(truth, spec) + rng.normal(0, 1.0, (15, 2))
        X = detections(pts[rng.permutation(15)])
        fit = fit_grid(X, spec, MIX_VGA, init=default_init(X))
        assert fit.converged
        err = np.linalg.norm(grid_centers(fit.params, spec) - grid_centers(truth, spec), axis=1)
        assert (err < 3.0).all()

    def test_fixed_point_converges_immediately(self):
        # Points exactly on the centers and init equal to the degenerate
        # truth (variances at the floor): EM has nothing left to move.
        spec = GridSpec(4, 3)
        truth = GridParams((100.0, 80.0), (90.0, 85.0), (SIGMA_FLOOR, SIGMA_FLOOR))
        X = detections(grid_centers(truth, spec))
        fit = fit_grid(X, spec, MIX_VGA, init=truth)
        assert fit.converged
        assert fit.iterations <= 2
        assert abs(fit.nll_history[-1] - fit.nll_history[0]) < 1e-9 * max(
            1.0, abs(fit.nll_history[0])
        )

    def test_outlier_contamination_monte_carlo(self):
        # 20% uniform outliers; fitted centers within 2 px (95th percentile).
        # An outlier sitting at the extreme corner hijacks the plain
        # top-left-origin initialization, so robustness comes from the
        # multistart entry point.
        spec = GridSpec(5, 3)
        truth = GridParams((170.0, 60.0), (90.0, 85.0), (1.0, 1.0))
        clean = grid_centers(truth, spec)
        errs = []
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            pts = clean + rng.normal(0, 1.0, clean.shape)
            outliers = rng.uniform([0, 0], [640, 480], size=(3, 2))
            X = detections(np.vstack([pts, outliers])[rng.permutation(18)])
            fit = fit_grid_robust(X, spec, MIX_VGA)
            errs.extend(
                np.linalg.norm(
                    grid_centers(fit.params, spec) - clean, axis=1
                ).tolist()
            )
        assert np.percentile(errs, 95) < 2.0

    def test_nll_history_non_increasing(self):
        rng = np.random.default_rng(15)
        for _ in range(30):
            X, spec, _ = sample_instance(rng, noise=rng.uniform(0.5, 12.0))
            fit = fit_grid(X, spec, MIX_VGA, init=default_init(X))
            diffs = np.diff(fit.nll_history)
            assert (diffs <= 1e-9).all()

    def test_requires_four_points(self):
        X = detections([[0, 0], [10, 0], [0, 10]])
        with pytest.raises(ValueError, match="at least 4 points"):
            fit_grid(X, GridSpec(2, 2), MIX_VGA)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(16)
        X, spec, _ = sample_instance(rng, noise=2.0, n_outliers=0)
        shift = np.array([37.5, -12.25])
        X2 = detections(X.points + shift)
        init = default_init(X)
        init2 = GridParams(init.origin + shift, init.spacing, init.sigma)
        fit = fit_grid(X, spec, MIX_VGA, init=init)
        fit2 = fit_grid(X2, spec, MIX_VGA, init=init2)
        np.testing.assert_allclose(fit2.params.origin - fit.params.origin, shift, atol=1e-6)
        np.testing.assert_allclose(fit2.params.spacing, fit.params.spacing, atol=1e-6)
        np.testing.assert_allclose(fit2.params.sigma, fit.params.sigma, atol=1e-6)

    def test_alpha_one_exact_grid_machine_precision(self):
        spec = GridSpec(4, 4)
        truth = GridParams((120.0, 90.0), (80.0, 75.0), (1.0, 1.0))
        X = detections(grid_centers(truth, spec))
        for sigma0 in ((640.0, 640.0), (10.0, 10.0), (3000.0, 3000.0)):
            init = GridParams((100.0, 70.0), (90.0, 90.0), sigma0)
            fit = fit_grid(X, spec, MixtureConfig(alpha=1.0), init=init, max_iter=500)
            np.testing.assert_allclose(fit.params.origin, truth.origin, atol=1e-8)
            np.testing.assert_allclose(fit.params.spacing, truth.spacing, atol=1e-8)

    def test_result_gamma_matches_final_params(self):
        rng = np.random.default_rng(17)
        X, spec, _ = sample_instance(rng)
        fit = fit_grid(X, spec, MIX_VGA, init=default_init(X))
        np.testing.assert_allclose(fit.gamma, e_step(X, fit.params, spec, MIX_VGA))


class TestSelectGridDims:
    def test_clean_panel_recovers_dims(self):
        rng = np.random.default_rng(18)
        spec = GridSpec(5, 3)
        truth = GridParams((170.0, 45.0), (95.0, 95.0), (1.0, 1.0))
        X = detections(grid_centers(truth, spec) + rng.normal(0, 1.0, (15, 2)))
        out = select_grid_dims(X, MIX_VGA, range(2, 9), range(2, 7))
        assert (out.rows, out.cols) == (5, 3)

    def test_perfect_square_minimal_k(self):
        X = detections([[100, 100], [200, 100], [100, 200], [200, 200]])
        out = select_grid_dims(X, MIX_VGA, range(2, 4), range(2, 4))
        assert (out.rows, out.cols) == (2, 2)

    def test_outlier_contamination_monte_carlo(self):
        spec = GridSpec(5, 3)
        truth = GridParams((170.0, 60.0), (95.0, 90.0), (1.0, 1.0))
        clean = grid_centers(truth, spec)
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(2000 + seed)
            pts = clean + rng.normal(0, 1.0, clean.shape)
            outliers = rng.uniform([0, 0], [640, 480], size=(2, 2))  # ~15%
            X = detections(np.vstack([pts, outliers])[rng.permutation(17)])
            out = select_grid_dims(X, MIX_VGA, range(2, 9), range(2, 7))
            hits += (out.rows, out.cols) == (5, 3)
        assert hits >= 90

    def test_candidate_k_cap(self):
        X = detections([[0, 0], [10, 0], [0, 10], [10, 10]])
        with pytest.raises(ValueError, match="4N"):
            select_grid_dims(X, MIX_VGA, range(2, 6), range(2, 6))

    def test_empty_range_rejected(self):
        X = detections([[0, 0], [10, 0], [0, 10], [10, 10]])
        with pytest.raises(ValueError):
            select_grid_dims(X, MIX_VGA, range(2, 2), range(2, 4))


class TestMixtureConfig:
    def test_alpha_bounds(self):
        with pytest.raises(ValueError):
            MixtureConfig(alpha=1.5)
        with pytest.raises(ValueError):
            MixtureConfig(alpha=-0.1)

    def test_for_image(self):
        mix = MixtureConfig.for_image(640, 480)
        assert mix.uniform_c == 640 * 480

    def test_uniform_c_positive(self):
        with pytest.raises(ValueError):
            MixtureConfig(uniform_c=0.0)


class TestGridParams:
    def test_spacing_must_be_positive(self):
        with pytest.raises(ValueError):
            GridParams((0, 0), (0.0, 10.0), (1.0, 1.0))

    def test_sigma_floor_enforced(self):
        with pytest.raises(ValueError):
            GridParams((0, 0), (10.0, 10.0), (1e-9, 1.0))
