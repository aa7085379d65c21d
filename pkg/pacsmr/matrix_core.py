"""
Numerical kernels shared by the estimators.

- nearest PSD matrix in the elementwise max norm (ADMM)
- eigenvalue helpers
- instrument strength diagnostics
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from pacsmr.errors import SingularMatrixError

logger = logging.getLogger(__name__)

# Eigenvalues below this fraction of ||m||_max count as zero when checking PSD
PSD_CLAMP = 1e-12


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    abs_tol: float = 1e-7
    rel_tol: float = 1e-6
    max_iter: int = 2000


DEFAULT_ADMM = AdmmConfig()


@dataclass(frozen=True)
class ProjectionResult:
    matrix: np.ndarray
    converged: bool
    iterations: int
    distance: float


@dataclass(frozen=True)
class InstrumentStrength:
    """Eigenvalue summary of the sample instrument strength matrix."""
    mu_min: float
    mu_max: float
    is_param: float
    r_n: float
    p: int
    scale: str = "raw"

    def to_dict(self):
        return {
            "mu_min": self.mu_min,
            "mu_max": self.mu_max,
            "is_param": self.is_param,
            "r_n": None if np.isnan(self.r_n) else self.r_n,
            "p": self.p,
            "scale": self.scale,
        }


# =============================================================================
# Eigenvalue helpers
# =============================================================================

def symmetrize(m):
    m = np.asarray(m, dtype=float)
    return (m + m.T) / 2


def max_norm(m):
    return float(np.max(np.abs(m))) if np.size(m) else 0.0


def min_eigenvalue(m):
    return float(linalg.eigvalsh(symmetrize(m))[0])


def is_psd(m, rel_tol=PSD_CLAMP):
    scale = max_norm(m)
    if scale == 0.0:
        return True
    return min_eigenvalue(m) >= -rel_tol * scale


def psd_part(m):
    """Frobenius projection onto the PSD cone (negative eigenvalues clamped)."""
    vals, vecs = linalg.eigh(symmetrize(m))
    clamped = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return symmetrize(clamped)


def near_null_space(m, rel_tol=1e-10):
    """Eigenvectors (columns) whose eigenvalues are <= rel_tol * largest |eigenvalue|."""
    vals, vecs = linalg.eigh(symmetrize(m))
    cutoff = rel_tol * max(np.max(np.abs(vals)), np.finfo(float).tiny)
    return vals[vals <= cutoff], vecs[:, vals <= cutoff]


def solve_symmetric(a, b, what="linear system", iteration=None):
    """Solve a symmetric system, Cholesky first, LU fallback."""
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=False)
        return linalg.cho_solve(factor, b, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.solve(a, b, assume_a="sym", check_finite=False)
    except (linalg.LinAlgError, ValueError) as exc:
        sv = linalg.svdvals(a)
        where = f" at iteration {iteration}" if iteration is not None else ""
        raise SingularMatrixError(
            f"singular {what}{where} (smallest singular value {sv[-1]:.3g})",
            smallest_singular_value=float(sv[-1]), iteration=iteration) from exc


# =============================================================================
# Max-norm PSD projection
# =============================================================================

def _project_l1_ball(x, radius):
    """Euclidean projection of vector x onto {||y||_1 <= radius}."""
    abs_x = np.abs(x)
    if abs_x.sum() <= radius:
        return x
    u = np.sort(abs_x)[::-1]
    cssv = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    rho = np.nonzero(u - (cssv - radius) / idx > 0)[0][-1]
    theta = (cssv[rho] - radius) / (rho + 1)
    return np.sign(x) * np.maximum(abs_x - theta, 0.0)


def _prox_max_norm(v, t):
    """prox of t * max|v_ij| via Moreau decomposition."""
    flat = v.reshape(-1)
    return (flat - _project_l1_ball(flat, t)).reshape(v.shape)


def nearest_psd_maxnorm(m, config=DEFAULT_ADMM):
    """
    argmin over PSD R of ||R - m||_max, solved by ADMM on R - S = m.

    The input is scaled to unit max norm so rho is scale free. Every iterate
    is symmetrized; the closest PSD iterate seen is returned. An m that is
    already PSD comes back unchanged with iterations=0.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    m = symmetrize(m)
    if is_psd(m):
        return ProjectionResult(m, True, 0, 0.0)

    scale = max_norm(m)
    a = m / scale
    n = a.shape[0]
    rho = config.rho

    r = psd_part(a)
    s = r - a
    dual = np.zeros_like(a)
    best, best_dist = r, max_norm(r - a)
    converged = False

    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        r = psd_part(s + a - dual / rho)
        s_prev = s
        s = symmetrize(_prox_max_norm(r - a + dual / rho, 1.0 / rho))
        residual = r - s - a
        dual = symmetrize(dual + rho * residual)

        dist = max_norm(r - a)
        if dist < best_dist:
            best, best_dist = r, dist

        primal_res = np.linalg.norm(residual)
        dual_res = rho * np.linalg.norm(s - s_prev)
        eps_primal = n * config.abs_tol + config.rel_tol * max(
            np.linalg.norm(r), np.linalg.norm(s), np.linalg.norm(a))
        eps_dual = n * config.abs_tol + config.rel_tol * np.linalg.norm(dual)
        if primal_res <= eps_primal and dual_res <= eps_dual:
            converged = True
            break

    if not converged:
        logger.warning("max-norm PSD projection did not converge in %d iterations", config.max_iter)
    return ProjectionResult(best * scale, converged, iteration, best_dist * scale)


def project_psd(m, config=DEFAULT_ADMM):
    return nearest_psd_maxnorm(m, config).matrix


# =============================================================================
# Instrument strength
# =============================================================================

def _inverse_sqrt(m):
    vals, vecs = linalg.eigh(symmetrize(m))
    if vals[0] <= 0:
        raise SingularMatrixError(
            f"V is not positive definite (min eigenvalue {vals[0]:.3g})",
            smallest_singular_value=float(abs(vals[0])))
    return (vecs / np.sqrt(vals)) @ vecs.T


def strength_from_matrix(s, p, scale="raw"):
    vals = linalg.eigvalsh(symmetrize(s))
    mu_min, mu_max = float(vals[0]), float(vals[-1])
    r_n = mu_min / np.sqrt(mu_min + p) if mu_min > 0 else float("nan")
    return InstrumentStrength(mu_min, mu_max, mu_min / np.sqrt(p), r_n, int(p), scale)


def instrument_strength(dq, whiten=False):
    """
    Eigenvalues of the sample instrument strength matrix Pi^T W Pi - V.

    whiten=True reports p * V^-1/2 (Pi^T W Pi - V) V^-1/2 instead, which does
    not depend on the trait scales and is what the tuning grids use.
    """
    s = dq.debiased_matrix
    if not whiten:
        return strength_from_matrix(s, dq.p, "raw")
    root = _inverse_sqrt(dq.v)
    return strength_from_matrix(dq.p * root @ s @ root, dq.p, "whitened")
