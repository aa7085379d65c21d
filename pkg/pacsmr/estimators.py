"""
Point estimators for summary-data multivariable MR.

All estimators work on a DesignQuantities object:

- IVW:        (Pi^T W Pi)^-1 Pi^T W Gamma
- dIVW:       A^-1 Pi^T W Gamma with A = (Pi^T W Pi - V)_+
- dRidge:     (A + phi I)^-1 Pi^T W Gamma
- dLASSO:     adaptive L1 on the debiased loss
- PACS:       adaptive L1 plus pairwise difference/sum penalties
- IVW-LASSO:  L1 on the plain IVW loss

Penalized fits use local quadratic approximation (LQA). Each LQA step
minimizes a quadratic majorizer of

    1/2 b'Ab - b'Pi'WGamma + (lambda/2) * penalty(b)

so the reported objective carries the same lambda/2 factor as the update.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg
from scipy.stats import norm

from pacsmr.errors import SingularMatrixError, UnidentifiedDirectionsError, ValidationError
from pacsmr.matrix_core import PSD_CLAMP, max_norm, solve_symmetric, symmetrize

logger = logging.getLogger(__name__)

# |beta_k| above this counts as selected
SELECTION_THRESHOLD = 1e-3

# Eigenvalues below this share of the largest count as unidentified
IDENTIFIED_RTOL = 1e-10


class Method(str, Enum):
    IVW = "ivw"
    DIVW = "divw"
    DRIDGE = "dridge"
    DLASSO = "dlasso"
    PACS = "pacs"
    IVW_LASSO = "ivw-lasso"


@dataclass(frozen=True)
class LqaConfig:
    tol: float = 1e-6
    max_iter: int = 500
    floor: float = 1e-8
    zero_tol: float = 1e-4
    fuse_tol: float = 1e-4
    fusion: str = "mean"  # or "precision"
    jitter: float = 1e-10


DEFAULT_LQA = LqaConfig()


# =============================================================================
# Result and weight types
# =============================================================================

@dataclass(frozen=True)
class FitResult:
    beta: np.ndarray
    converged: bool
    iterations: int
    objective: float
    method: Method
    variance: np.ndarray = None
    lam: float = None
    tau: float = None
    threshold: float = None
    objective_path: tuple = field(default=(), repr=False)

    @property
    def k(self):
        return self.beta.size

    @property
    def se(self):
        if self.variance is None:
            return None
        return np.sqrt(np.maximum(np.diag(self.variance), 0.0))

    @property
    def p_values(self):
        se = self.se
        if se is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, self.beta / se, np.inf * np.sign(self.beta))
        return 2 * norm.sf(np.abs(z))

    @property
    def selected(self):
        return np.abs(self.beta) > SELECTION_THRESHOLD

    def bonferroni_selected(self, alpha=0.05):
        """Selection by p < alpha/K, the rule for unpenalized estimators."""
        pvals = self.p_values
        if pvals is None:
            raise ValidationError(f"{self.method.value} fit has no variance; cannot compute p-values")
        return pvals < alpha / self.k

    def to_dict(self, exposure_names=None):
        names = list(exposure_names) if exposure_names is not None else [
            f"exposure{i + 1}" for i in range(self.k)]
        se = self.se
        pvals = self.p_values
        return {
            "method": self.method.value,
            "exposures": names,
            "beta": self.beta.tolist(),
            "se": None if se is None else se.tolist(),
            "p_values": None if pvals is None else pvals.tolist(),
            "selected": self.selected.tolist(),
            "lambda": self.lam,
            "tau": self.tau,
            "threshold": self.threshold,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "objective": float(self.objective),
        }


@dataclass(frozen=True)
class PacsWeights:
    """Adaptive weights; pairwise matrices are strictly upper triangular."""
    w: np.ndarray
    w_minus: np.ndarray
    w_plus: np.ndarray
    tau: float
    threshold: float = None

    @property
    def k(self):
        return self.w.size

    @classmethod
    def lasso(cls, w, tau=None):
        w = np.asarray(w, dtype=float)
        zeros = np.zeros((w.size, w.size))
        return cls(w, zeros, zeros.copy(), tau)

    def without_pairs(self):
        return PacsWeights.lasso(self.w, self.tau)


def pacs_weights(beta_init, r_hat, tau, threshold=None, floor=DEFAULT_LQA.floor):
    """
    w_k      = |b_k|^-tau
    w_km(-)  = (1 - r_km)^-tau |b_k - b_m|^-tau
    w_km(+)  = (1 + r_km)^-tau |b_k + b_m|^-tau

    Every base is floored at `floor`. With a threshold x the difference
    weight is kept only where r_km > x and the sum weight only where r_km < -x.
    """
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    beta = np.asarray(beta_init, dtype=float).reshape(-1)
    r_hat = np.asarray(r_hat, dtype=float)
    k = beta.size
    if r_hat.shape != (k, k):
        raise ValidationError(f"correlation matrix has shape {r_hat.shape}, expected {(k, k)}")

    w = np.maximum(np.abs(beta), floor) ** -tau
    diff = np.abs(beta[:, None] - beta[None, :])
    total = np.abs(beta[:, None] + beta[None, :])
    w_minus = (np.maximum(1 - r_hat, floor) ** -tau) * (np.maximum(diff, floor) ** -tau)
    w_plus = (np.maximum(1 + r_hat, floor) ** -tau) * (np.maximum(total, floor) ** -tau)
    if threshold is not None:
        w_minus = np.where(r_hat > threshold, w_minus, 0.0)
        w_plus = np.where(r_hat < -threshold, w_plus, 0.0)
    upper = np.triu(np.ones((k, k), dtype=bool), k=1)
    return PacsWeights(w, np.where(upper, w_minus, 0.0), np.where(upper, w_plus, 0.0),
                       float(tau), threshold)


def pacs_penalty(beta, weights):
    beta = np.asarray(beta, dtype=float)
    diff = np.abs(beta[:, None] - beta[None, :])
    total = np.abs(beta[:, None] + beta[None, :])
    return float(weights.w @ np.abs(beta)
                 + np.sum(weights.w_minus * diff)
                 + np.sum(weights.w_plus * total))


def pacs_objective(a, b, beta, weights, lam):
    """1/2 beta'A beta - b'beta + (lambda/2) * penalty."""
    beta = np.asarray(beta, dtype=float)
    return float(0.5 * beta @ a @ beta - b @ beta + 0.5 * lam * pacs_penalty(beta, weights))


# =============================================================================
# Closed-form estimators
# =============================================================================

def _check_conditioning(m, what, max_condition=1e12):
    sv = linalg.svdvals(m)
    if sv[-1] <= 0 or sv[0] / sv[-1] >= max_condition:
        raise SingularMatrixError(
            f"{what} is singular or ill-conditioned (smallest singular value {sv[-1]:.3g})",
            smallest_singular_value=float(sv[-1]))


def _check_identified(a, rel_tol=IDENTIFIED_RTOL):
    vals, vecs = linalg.eigh(a)
    cutoff = rel_tol * max(vals[-1], np.finfo(float).tiny)
    null = vals <= cutoff
    if null.any():
        directions = vecs[:, null]
        listing = "; ".join(np.array2string(d, precision=3, separator=",") for d in directions.T)
        raise UnidentifiedDirectionsError(
            f"unidentified directions after PSD projection ({int(null.sum())} near-null "
            f"eigenvectors): {listing}", directions=directions)


def sandwich_variance(dq, bread, beta, bread_inverse=None):
    """
    bread^-1 Vhat bread^-T with

        Vhat = sum_j (1 + b'V_j b) gamma_j gamma_j' s_Yj^-2 + V_j b b' V_j

    gamma_j gamma_j' s_Yj^-2 estimates M_j + V_j without bias. Pass
    `bread_inverse` when the bread is singular (e.g. a pseudo-inverse).
    """
    vj = dq.v_per_snp
    outer = dq.pi_hat[:, :, None] * dq.pi_hat[:, None, :] * dq.weights[:, None, None]
    vb = vj @ beta
    quad = vb @ beta
    meat = np.einsum("j,jkl->kl", 1.0 + quad, outer) + vb.T @ vb
    inv = linalg.inv(bread) if bread_inverse is None else bread_inverse
    return symmetrize(inv @ meat @ inv.T)


def fit_ivw(dq, with_variance=True):
    """
    Multivariable IVW. Standard errors use multiplicative random effects:
    the fixed-effect covariance is inflated by the residual variance when
    that exceeds 1.
    """
    normal = dq.normal_matrix
    _check_conditioning(normal, "IVW normal matrix Pi^T W Pi")
    beta = solve_symmetric(normal, dq.rhs, "IVW normal equations")
    resid = dq.gamma_vec - dq.pi_hat @ beta
    rss = float(np.sum(dq.weights * resid ** 2))
    variance = None
    if with_variance:
        dispersion = max(1.0, rss / max(dq.p - dq.k, 1))
        variance = symmetrize(linalg.inv(normal) * dispersion)
    return FitResult(beta, True, 1, 0.5 * rss, Method.IVW, variance)


def _pseudo_inverse(a, rel_tol=IDENTIFIED_RTOL):
    """Moore-Penrose inverse of a symmetric PSD matrix and its numerical rank."""
    vals, vecs = linalg.eigh(a)
    keep = vals > rel_tol * max(vals[-1], np.finfo(float).tiny)
    inverse = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return symmetrize(inverse), int(keep.sum())


def fit_divw(dq, with_variance=False):
    """
    Debiased IVW on the projected matrix A = (Pi^T W Pi - V)_+.

    A projected A lies on the boundary of the PSD cone, so it is solved by
    pseudo-inverse and the dropped directions are logged. A debiased matrix
    that is singular without projection raises UnidentifiedDirectionsError.
    """
    a = dq.projected_matrix
    inverse = None
    if dq.projection.iterations:
        inverse, rank = _pseudo_inverse(a)
        if rank < dq.k:
            logger.warning("dIVW: projected debiased matrix has rank %d of %d, "
                           "solving by pseudo-inverse", rank, dq.k)
        beta = inverse @ dq.rhs
    else:
        _check_identified(a)
        beta = solve_symmetric(a, dq.rhs, "debiased normal equations")
    variance = sandwich_variance(dq, a, beta, inverse) if with_variance else None
    objective = float(0.5 * beta @ a @ beta - dq.rhs @ beta)
    return FitResult(beta, True, 1, objective, Method.DIVW, variance)


def fit_dridge(dq, phi, with_variance=False):
    """Debiased ridge: (A + phi I)^-1 Pi^T W Gamma. Objective uses phi/2 ||b||^2."""
    if phi < 0:
        raise ValidationError(f"ridge penalty must be non-negative, got {phi}")
    a = dq.projected_matrix + phi * np.eye(dq.k)
    beta = solve_symmetric(a, dq.rhs, "ridge system")
    variance = sandwich_variance(dq, a, beta) if with_variance else None
    objective = float(0.5 * beta @ dq.projected_matrix @ beta - dq.rhs @ beta
                      + 0.5 * phi * beta @ beta)
    return FitResult(beta, True, 1, objective, Method.DRIDGE, variance, lam=float(phi))


# =============================================================================
# Local quadratic approximation
# =============================================================================

def _penalty_rows(k, weights):
    """Stack the L1, difference and sum operators with their weights, zero weights dropped."""
    rows = [np.eye(k)]
    coef = [weights.w]
    iu, ju = np.triu_indices(k, 1)
    for pair_weights, sign in ((weights.w_minus, -1.0), (weights.w_plus, 1.0)):
        wp = pair_weights[iu, ju]
        keep = wp > 0
        if keep.any():
            d = np.zeros((int(keep.sum()), k))
            d[np.arange(d.shape[0]), iu[keep]] = 1.0
            d[np.arange(d.shape[0]), ju[keep]] = sign
            rows.append(d)
            coef.append(wp[keep])
    ops = np.vstack(rows)
    coef = np.concatenate(coef)
    keep = coef > 0
    return ops[keep], coef[keep]


def _matrix_root(a):
    """R with R'R = a for PSD a."""
    vals, vecs = linalg.eigh(a)
    return np.sqrt(np.maximum(vals, 0.0))[:, None] * vecs.T


def _lqa_step(root, ops, coef, beta, lam, b, floor, iteration):
    """
    Solve {A + (lam/2) D' diag(coef/|D beta|) D} x = b.

    The system is factored through a QR of the stacked square roots rather
    than formed explicitly; near-fused pairs carry huge coefficients.
    """
    if lam > 0 and ops.shape[0]:
        scale = np.sqrt(0.5 * lam * coef / np.maximum(np.abs(ops @ beta), floor))
        stacked = np.vstack([scale[:, None] * ops, root])
    else:
        stacked = root
    r = linalg.qr(stacked, mode="r", check_finite=False)[0][:beta.size]
    diag = np.abs(np.diag(r))
    if diag.min() == 0.0:
        raise SingularMatrixError(f"singular LQA system at iteration {iteration}",
                                  smallest_singular_value=0.0, iteration=iteration)
    x = linalg.cho_solve((r, False), b, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError(f"non-finite LQA solution at iteration {iteration}",
                                  smallest_singular_value=float(diag.min()), iteration=iteration)
    return x


def _fuse(beta, weights, precision, config):
    """Hard-zero tiny coefficients and merge near-equal (or near-opposite) pairs."""
    beta = np.where(np.abs(beta) < config.zero_tol, 0.0, beta)
    k = beta.size
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(k):
        for j in range(i + 1, k):
            if beta[i] == 0.0 or beta[j] == 0.0:
                continue
            same_sign = np.sign(beta[i]) == np.sign(beta[j])
            if same_sign and weights.w_minus[i, j] > 0 and abs(beta[i] - beta[j]) < config.fuse_tol:
                parent[find(i)] = find(j)
            elif not same_sign and weights.w_plus[i, j] > 0 and abs(beta[i] + beta[j]) < config.fuse_tol:
                parent[find(i)] = find(j)

    groups = {}
    for i in range(k):
        groups.setdefault(find(i), []).append(i)
    fused = beta.copy()
    for members in groups.values():
        if len(members) < 2:
            continue
        members = np.array(members)
        mags = np.abs(beta[members])
        if config.fusion == "precision" and precision[members].sum() > 0:
            magnitude = float(np.average(mags, weights=precision[members]))
        else:
            magnitude = float(mags.mean())
        fused[members] = np.sign(beta[members]) * magnitude
    return fused


def _lqa(a, b, weights, lam, beta_init, config, method):
    if lam < 0:
        raise ValidationError(f"lambda must be non-negative, got {lam}")
    k = b.size
    if weights.k != k:
        raise ValidationError(f"weights are for {weights.k} exposures, data has {k}")
    strictly_pd = linalg.eigvalsh(a)[0] > PSD_CLAMP * max_norm(a)
    a_solve = a
    if not strictly_pd:
        trace = np.trace(a)
        a_solve = a + config.jitter * (trace / k if trace > 0 else 1.0) * np.eye(k)
    root = _matrix_root(a_solve)
    ops, coef = _penalty_rows(k, weights)

    if beta_init is None:
        beta = solve_symmetric(a_solve, b, "LQA initial system")
    else:
        beta = np.array(beta_init, dtype=float).reshape(-1)
        if beta.size != k:
            raise ValidationError(f"beta_init has length {beta.size}, expected {k}")

    objective = pacs_objective(a, b, beta, weights, lam)
    path = [objective]
    best, best_obj = beta, objective
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        new = _lqa_step(root, ops, coef, beta, lam, b, config.floor, iteration)
        change = float(np.max(np.abs(new - beta)))
        beta = new
        previous, objective = objective, pacs_objective(a, b, beta, weights, lam)
        path.append(objective)
        if strictly_pd and objective > previous + 1e-9 * max(abs(previous), 1.0):
            logger.warning("LQA objective increased at iteration %d: %.12g -> %.12g",
                           iteration, previous, objective)
        if objective <= best_obj:
            best, best_obj = beta, objective
        if change < config.tol:
            converged = True
            break

    if not converged:
        logger.warning("%s LQA did not converge in %d iterations (lambda=%.4g)",
                       method.value, config.max_iter, lam)
        beta = best
    if lam > 0:
        beta = _fuse(beta, weights, np.diag(a), config)
    objective = pacs_objective(a, b, beta, weights, lam)
    return FitResult(beta, converged, iteration, objective, method, lam=float(lam),
                     tau=weights.tau, threshold=weights.threshold, objective_path=tuple(path))


def fit_pacs(dq, weights, lam, beta_init=None, config=DEFAULT_LQA):
    """MVMR-PACS on the projected debiased loss via LQA."""
    return _lqa(dq.projected_matrix, dq.rhs, weights, lam, beta_init, config, Method.PACS)


def _as_lasso_weights(weights):
    if isinstance(weights, PacsWeights):
        return weights.without_pairs()
    return PacsWeights.lasso(weights)


def fit_dlasso(dq, weights, lam, beta_init=None, config=DEFAULT_LQA):
    """Debiased adaptive LASSO: PACS with every pairwise weight zero."""
    return _lqa(dq.projected_matrix, dq.rhs, _as_lasso_weights(weights), lam, beta_init,
                config, Method.DLASSO)


def fit_ivw_lasso(dq, weights, lam, beta_init=None, config=DEFAULT_LQA):
    """L1-penalized IVW loss (no measurement-error correction)."""
    return _lqa(dq.normal_matrix, dq.rhs, _as_lasso_weights(weights), lam, beta_init,
                config, Method.IVW_LASSO)
