"""
Estimator tests.

Closed forms (IVW, dIVW, dRidge) are checked against exact data and
independent solvers; the LQA-based fits against hand-solved two-exposure
problems where the penalized optimum is known.
"""
import logging

import numpy as np
import pytest

from pacsmr import estimators
from pacsmr.errors import UnidentifiedDirectionsError, ValidationError
from pacsmr.estimators import (
    LqaConfig,
    Method,
    PacsWeights,
    fit_divw,
    fit_dlasso,
    fit_dridge,
    fit_ivw,
    fit_ivw_lasso,
    fit_pacs,
    pacs_objective,
    pacs_penalty,
    pacs_weights,
)
from pacsmr.summary_data import build_design
from utils import make_exact_dataset, orthonormal_design, weighted_least_squares
from estimators.test_consts import (
    DESCENT_SLACK,
    EXACT_TOLERANCE,
    IDENTICAL_TOLERANCE,
    LQA_LAMBDA,
    LQA_TOLERANCE,
    OPTIMALITY_SLACK,
    PERTURBATIONS,
    RIDGE_PENALTIES,
    TAUS,
)


def pair_weights(kind, l1=1e-3):
    """Two exposures with one pairwise weight of 1 ('minus', 'plus' or None)."""
    pair = np.array([[0.0, 1.0], [0.0, 0.0]])
    zeros = np.zeros((2, 2))
    w_minus = pair if kind == "minus" else zeros
    w_plus = pair if kind == "plus" else zeros
    return PacsWeights(np.full(2, l1), w_minus, w_plus, 1.0)


# =============================================================================
# IVW
# =============================================================================

class TestIvw:
    """Inverse-variance weighted estimator."""

    def test_exact_data_recovers_beta(self):
        """Gamma = Pi beta exactly gives beta back."""
        beta = np.array([1.0, -0.5, 0.25])
        fit = fit_ivw(build_design(make_exact_dataset(beta=beta)))
        np.testing.assert_allclose(fit.beta, beta, atol=EXACT_TOLERANCE)
        assert fit.method == Method.IVW

    def test_matches_weighted_least_squares(self, toy_dataset):
        """Normal equations agree with lstsq on sqrt(w)-scaled rows."""
        dq = build_design(toy_dataset)
        expected = weighted_least_squares(dq.pi_hat, dq.gamma_vec, dq.weights)
        np.testing.assert_allclose(fit_ivw(dq).beta, expected, atol=EXACT_TOLERANCE)

    def test_single_exposure_formula(self, make_dataset):
        """K=1: sum(g G w) / sum(g^2 w)."""
        dq = build_design(make_dataset(beta=(0.7,)))
        g, big_g, w = dq.pi_hat[:, 0], dq.gamma_vec, dq.weights
        expected = np.sum(g * big_g * w) / np.sum(g ** 2 * w)
        assert fit_ivw(dq).beta[0] == pytest.approx(expected, rel=1e-12)

    def test_variance_without_overdispersion(self):
        """Zero residuals leave the fixed-effect covariance unscaled."""
        dq = build_design(make_exact_dataset())
        fit = fit_ivw(dq)
        np.testing.assert_allclose(fit.variance, np.linalg.inv(dq.normal_matrix), rtol=1e-10)

    def test_bonferroni_uses_alpha_over_k(self, toy_dataset):
        """Strong causal exposures pass p < 0.05/K."""
        fit = fit_ivw(build_design(toy_dataset))
        selected = fit.bonferroni_selected()
        assert selected[0] and selected[1]
        assert fit.bonferroni_selected(alpha=0.0).sum() == 0

    def test_bonferroni_needs_variance(self, toy_dataset):
        fit = fit_ivw(build_design(toy_dataset), with_variance=False)
        with pytest.raises(ValidationError):
            fit.bonferroni_selected()


# =============================================================================
# Debiased IVW and ridge
# =============================================================================

class TestDebiasedIvw:
    """dIVW on the projected debiased matrix."""

    def test_zero_v_reduces_to_ivw(self):
        b = np.array([0.3, -1.2, 2.0])
        fit = fit_divw(orthonormal_design(b))
        np.testing.assert_allclose(fit.beta, b, atol=EXACT_TOLERANCE)

    def test_single_exposure_formula(self, make_dataset):
        """K=1: sum(g G w) / (sum(g^2 w) - sum(se^2 w))."""
        ds = make_dataset(beta=(0.7,))
        dq = build_design(ds)
        g, big_g, w = dq.pi_hat[:, 0], dq.gamma_vec, dq.weights
        se = ds.se_x[:, 0]
        expected = np.sum(g * big_g * w) / (np.sum(g ** 2 * w) - np.sum(se ** 2 * w))
        assert fit_divw(dq).beta[0] == pytest.approx(expected, rel=1e-12)

    def test_corrects_weak_instrument_dilution(self, make_dataset):
        """With noisy exposures IVW shrinks toward zero; dIVW does not."""
        ds = make_dataset(beta=(1.0,), strength=0.01, p=4000, seed=2)
        dq = build_design(ds)
        assert abs(fit_divw(dq).beta[0] - 1.0) < abs(fit_ivw(dq).beta[0] - 1.0)

    def test_unidentified_directions(self):
        """A singular debiased matrix that needs no projection names the missing direction."""
        dq = orthonormal_design([1.0, 1.0, 1.0], v=np.diag([0.0, 1.0, 0.0]))
        with pytest.raises(UnidentifiedDirectionsError) as excinfo:
            fit_divw(dq)
        direction = excinfo.value.directions[:, 0]
        assert abs(direction[1]) == pytest.approx(1.0)

    def test_projected_matrix_solved_by_pseudo_inverse(self, caplog):
        """An indefinite debiased matrix is projected onto the cone boundary and still fits."""
        dq = orthonormal_design([1.0, 0.5, -0.3], v=np.diag([0.0, 0.0, 1.5]))
        assert dq.projection.iterations > 0
        with caplog.at_level(logging.WARNING, logger="pacsmr.estimators"):
            fit = fit_divw(dq, with_variance=True)
        expected = np.linalg.pinv(dq.projected_matrix, rcond=1e-10, hermitian=True) @ dq.rhs
        np.testing.assert_allclose(fit.beta, expected, rtol=1e-8, atol=EXACT_TOLERANCE)
        assert np.all(np.isfinite(fit.beta)) and np.all(np.isfinite(fit.variance))
        assert "pseudo-inverse" in caplog.text

    def test_sandwich_variance_is_symmetric_psd(self, toy_dataset):
        fit = fit_divw(build_design(toy_dataset), with_variance=True)
        np.testing.assert_allclose(fit.variance, fit.variance.T, atol=1e-15)
        assert np.linalg.eigvalsh(fit.variance)[0] >= -1e-12 * np.abs(fit.variance).max()
        assert np.all(fit.se > 0)


class TestDebiasedRidge:
    """dRidge closed form."""

    def test_zero_penalty_equals_divw(self, toy_dataset):
        dq = build_design(toy_dataset)
        np.testing.assert_allclose(fit_dridge(dq, 0.0).beta, fit_divw(dq).beta,
                                   atol=IDENTICAL_TOLERANCE)

    def test_shrinkage_is_monotone(self, toy_dataset):
        """||beta|| falls as phi grows."""
        dq = build_design(toy_dataset)
        norms = [np.linalg.norm(fit_dridge(dq, phi).beta) for phi in RIDGE_PENALTIES]
        assert norms[0] > norms[1] > norms[2]

    @pytest.mark.parametrize("phi", RIDGE_PENALTIES)
    def test_matches_independent_solver(self, toy_dataset, phi):
        dq = build_design(toy_dataset)
        expected = np.linalg.solve(dq.projected_matrix + phi * np.eye(dq.k), dq.rhs)
        np.testing.assert_allclose(fit_dridge(dq, phi).beta, expected, rtol=EXACT_TOLERANCE)

    def test_negative_penalty_rejected(self, toy_dataset):
        with pytest.raises(ValidationError):
            fit_dridge(build_design(toy_dataset), -1.0)


# =============================================================================
# Adaptive weights
# =============================================================================

class TestPacsWeights:
    """w_k, w_km(-) and w_km(+)."""

    BETA = np.array([1.0, 0.5, -0.25])
    R_HAT = np.array([[1.0, 0.5, -0.2], [0.5, 1.0, 0.9], [-0.2, 0.9, 1.0]])

    def test_formulas(self):
        weights = pacs_weights(self.BETA, self.R_HAT, tau=1.0)
        np.testing.assert_allclose(weights.w, [1.0, 2.0, 4.0])
        # (1 - 0.5)^-1 |1 - 0.5|^-1
        assert weights.w_minus[0, 1] == pytest.approx(4.0)
        # (1 - 0.2)^-1 |1 - 0.25|^-1
        assert weights.w_plus[0, 2] == pytest.approx(1.0 / (0.8 * 0.75))

    def test_pairwise_weights_upper_triangular(self):
        weights = pacs_weights(self.BETA, self.R_HAT, tau=2.0)
        assert np.all(np.tril(weights.w_minus) == 0)
        assert np.all(np.tril(weights.w_plus) == 0)

    def test_threshold_keeps_only_strong_correlations(self):
        weights = pacs_weights(self.BETA, self.R_HAT, tau=1.0, threshold=0.8)
        assert weights.w_minus[1, 2] > 0
        assert weights.w_minus[0, 1] == 0
        assert np.all(weights.w_plus == 0)

    @pytest.mark.parametrize("tau", TAUS)
    def test_zero_estimates_give_finite_weights(self, tau):
        weights = pacs_weights(np.zeros(3), self.R_HAT, tau)
        assert np.all(np.isfinite(weights.w)) and np.all(weights.w > 0)
        assert np.all(np.isfinite(weights.w_minus)) and np.all(np.isfinite(weights.w_plus))

    def test_non_positive_tau_rejected(self):
        with pytest.raises(ValidationError):
            pacs_weights(self.BETA, self.R_HAT, tau=0.0)


# =============================================================================
# Penalized fits (LQA)
# =============================================================================

class TestPacsObjective:
    """Objective and penalty bookkeeping."""

    def test_objective_value(self):
        a, b = np.eye(2), np.array([1.0, 1.1])
        # 1/2 * 2 - 2.1 + (1/2) * (2e-3 + 0)
        assert pacs_objective(a, b, np.ones(2), pair_weights("minus"), 1.0) == pytest.approx(-1.099)

    def test_penalty_zero_at_origin(self):
        assert pacs_penalty(np.zeros(2), pair_weights("plus")) == 0.0


class TestPacsFit:
    """LQA solutions of two-exposure problems with A = I."""

    def test_difference_penalty_fuses(self):
        """Optimum of 1/2||b - beta||^2 + |b1 - b2|/2 + small L1 is a fused pair."""
        fit = fit_pacs(orthonormal_design([1.0, 1.1]), pair_weights("minus"), 1.0)
        assert fit.converged
        assert fit.beta[0] == fit.beta[1]
        assert fit.beta[0] == pytest.approx(1.0495, abs=LQA_TOLERANCE)

    def test_sum_penalty_fuses_opposite_signs(self):
        fit = fit_pacs(orthonormal_design([1.0, -1.1]), pair_weights("plus"), 1.0)
        assert fit.beta[0] == -fit.beta[1]
        assert fit.beta[0] == pytest.approx(1.0495, abs=LQA_TOLERANCE)

    def test_no_pair_weight_no_fusion(self):
        fit = fit_pacs(orthonormal_design([1.0, 1.1]), pair_weights(None), 1.0)
        np.testing.assert_allclose(fit.beta, [1.0 - 5e-4, 1.1 - 5e-4], atol=1e-5)

    def test_large_lambda_zeroes_everything(self):
        weights = PacsWeights.lasso(np.ones(2), 1.0)
        fit = fit_pacs(orthonormal_design([1.0, 1.1]), weights, 1e6)
        assert np.all(fit.beta == 0.0)

    def test_objective_path_descends(self):
        fit = fit_pacs(orthonormal_design([1.0, 1.1]), pair_weights("minus"), 1.0)
        steps = np.diff(fit.objective_path)
        assert np.all(steps <= DESCENT_SLACK), f"objective rose by {steps.max():.3g}"

    def test_objective_path_descends_on_correlated_design(self, make_dataset):
        """Five correlated exposures, a null among them and all pairwise penalties active."""
        dq = build_design(make_dataset(p=300, beta=(0.6, 0.6, 0.0, -0.3, 0.2), rho=0.5, seed=21))
        r_hat = np.corrcoef(dq.pi_hat.T)
        weights = pacs_weights(fit_dridge(dq, 1.0).beta, r_hat, 1.0)
        fit = fit_pacs(dq, weights, LQA_LAMBDA)
        path = np.asarray(fit.objective_path)
        assert path.size > 2
        steps = np.diff(path)
        assert np.all(steps <= DESCENT_SLACK * abs(path[0])), f"objective rose by {steps.max():.3g}"

    def test_objective_increase_is_logged(self, monkeypatch, caplog):
        monkeypatch.setattr(estimators, "_lqa_step", lambda *args: np.full(2, 100.0))
        with caplog.at_level(logging.WARNING, logger="pacsmr.estimators"):
            fit_pacs(orthonormal_design([1.0, 1.1]), pair_weights(None), 1.0,
                     config=LqaConfig(max_iter=5))
        increases = [r for r in caplog.records if "objective increased" in r.getMessage()]
        assert increases and increases[0].levelno == logging.WARNING

    def test_zero_lambda_equals_divw(self, toy_dataset):
        dq = build_design(toy_dataset)
        weights = pacs_weights(fit_divw(dq).beta, np.eye(3), 1.0)
        fit = fit_pacs(dq, weights, 0.0)
        np.testing.assert_allclose(fit.beta, fit_divw(dq).beta, atol=1e-8)

    def test_result_records_tuning(self):
        weights = pair_weights("minus")
        fit = fit_pacs(orthonormal_design([1.0, 1.1]), weights, 0.5)
        assert fit.method == Method.PACS
        assert fit.lam == 0.5 and fit.tau == 1.0
        assert fit.to_dict()["lambda"] == 0.5

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValidationError):
            fit_pacs(orthonormal_design([1.0, 1.1]), pair_weights(None), -1.0)


class TestLassoVariants:
    """dLASSO and IVW-LASSO share the LQA core."""

    def test_dlasso_ignores_pairwise_weights(self):
        dq = orthonormal_design([1.0, 1.1])
        with_pairs = fit_dlasso(dq, pair_weights("minus"), 1.0)
        without = fit_dlasso(dq, pair_weights(None), 1.0)
        np.testing.assert_array_equal(with_pairs.beta, without.beta)
        assert with_pairs.method == Method.DLASSO

    def test_pacs_without_pair_weights_is_dlasso(self, make_dataset):
        dq = build_design(make_dataset(p=150, beta=(0.4, -0.2, 0.0, 0.3), rho=0.4, seed=5))
        weights = pacs_weights(fit_divw(dq).beta, np.corrcoef(dq.pi_hat.T), 1.0)
        lasso = fit_dlasso(dq, weights, 0.1)
        pacs = fit_pacs(dq, weights.without_pairs(), 0.1)
        np.testing.assert_allclose(pacs.beta, lasso.beta, atol=1e-8)

    def test_dlasso_zero_lambda_equals_divw(self, toy_dataset):
        dq = build_design(toy_dataset)
        fit = fit_dlasso(dq, np.ones(3), 0.0)
        np.testing.assert_allclose(fit.beta, fit_divw(dq).beta, atol=1e-8)

    def test_dlasso_is_a_local_minimum(self, make_dataset, rng):
        """No perturbation of size up to 0.1 lowers the dLASSO objective."""
        dq = build_design(make_dataset(p=50, beta=(0.5, 0.0, -0.4), seed=8))
        a, b = dq.projected_matrix, dq.rhs
        weights = PacsWeights.lasso(np.abs(fit_divw(dq).beta) ** -1.0, 1.0)
        lam = 0.05 * np.trace(a) / dq.k
        fit = fit_dlasso(dq, weights, lam)
        best = pacs_objective(a, b, fit.beta, weights, lam)
        directions = rng.standard_normal((PERTURBATIONS, dq.k))
        directions /= np.linalg.norm(directions, axis=1)[:, None]
        sizes = rng.uniform(0.0, 0.1, PERTURBATIONS)
        values = [pacs_objective(a, b, fit.beta + s * d, weights, lam)
                  for s, d in zip(sizes, directions)]
        assert min(values) >= best - OPTIMALITY_SLACK * abs(best)

    def test_ivw_lasso_zero_lambda_equals_ivw(self, toy_dataset):
        dq = build_design(toy_dataset)
        fit = fit_ivw_lasso(dq, np.ones(3), 0.0)
        np.testing.assert_allclose(fit.beta, fit_ivw(dq).beta, atol=1e-8)
        assert fit.method == Method.IVW_LASSO
