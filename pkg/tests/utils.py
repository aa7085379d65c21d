"""Test utilities: synthetic summary data, exact designs and brute-force oracles."""
import numpy as np

from pacsmr.summary_data import DesignQuantities, SummaryDataset


# =============================================================================
# Synthetic datasets
# =============================================================================

def compound(rho, k):
    m = np.full((k, k), float(rho))
    np.fill_diagonal(m, 1.0)
    return m


def make_dataset(p=200, beta=(0.5, 0.5, 0.0), strength=0.05, se_x=0.01, se_y=0.01,
                 rho=0.3, sigma_rho=0.2, seed=11):
    """
    Random summary data with known truth.

    True associations have SD `strength` and exposure correlation `rho`;
    the estimation errors have correlation `sigma_rho` (also the Sigma
    handed to the dataset).
    """
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    k = beta.size
    pi = rng.normal(0.0, strength, (p, k)) @ np.linalg.cholesky(compound(rho, k)).T
    sigma = compound(sigma_rho, k)
    noise = rng.standard_normal((p, k)) @ np.linalg.cholesky(sigma).T
    gamma_hat = pi + se_x * noise
    gamma_outcome = pi @ beta + se_y * rng.standard_normal(p)
    return SummaryDataset.from_arrays(gamma_hat, np.full((p, k), se_x), gamma_outcome,
                                      np.full(p, se_y), sigma)


def make_exact_dataset(p=50, beta=(1.0, -0.5, 0.25), seed=3):
    """Gamma_hat = Pi_hat beta exactly, unequal SEs."""
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    k = beta.size
    pi = rng.normal(0.0, 1.0, (p, k))
    se_x = rng.uniform(0.05, 0.1, (p, k))
    se_y = rng.uniform(0.05, 0.2, p)
    return SummaryDataset.from_arrays(pi, se_x, pi @ beta, se_y)


def orthonormal_design(b, p=40, seed=5, v=None):
    """
    DesignQuantities with Pi'WPi = I and Pi'WGamma = b.

    `v` (default zero) is subtracted to form the debiased matrix; Sigma_Xj
    is set so that sum_j w_j Sigma_Xj = v.
    """
    b = np.asarray(b, dtype=float)
    k = b.size
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((p, k)))
    v = np.zeros((k, k)) if v is None else np.asarray(v, dtype=float)
    sigma_xj = np.repeat((v / p)[None, :, :], p, axis=0)
    return DesignQuantities(q, q @ b, np.ones(p), v, sigma_xj)


def scaled_design(c, v0, p=30, k=3, seed=9):
    """Pi'WPi = c I and V = v0 I, so the debiased matrix is (c - v0) I."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((p, k)))
    v = v0 * np.eye(k)
    sigma_xj = np.repeat((v / p)[None, :, :], p, axis=0)
    return DesignQuantities(np.sqrt(c) * q, np.zeros(p), np.ones(p), v, sigma_xj)


def random_indefinite(k, seed):
    rng = np.random.default_rng(seed)
    vecs, _ = np.linalg.qr(rng.standard_normal((k, k)))
    vals = np.linspace(-1.0, 2.0, k)
    return (vecs * vals) @ vecs.T


def random_symmetric(rng, k):
    x = rng.normal(size=(k, k))
    return (x + x.T) / 2


# =============================================================================
# Oracles
# =============================================================================

def weighted_least_squares(pi, gamma, weights):
    """IVW by an independent route: lstsq on sqrt(w)-scaled rows."""
    root = np.sqrt(weights)
    return np.linalg.lstsq(pi * root[:, None], gamma * root, rcond=None)[0]


def maxnorm_psd_distance_2x2(m, iters=200):
    """
    Exact min over PSD R of ||R - m||_max for symmetric 2x2 m, by bisection on t.

    t is feasible iff a = m11 + t and c = m22 + t are non-negative and
    a * c >= max(|m12| - t, 0)^2 (widest diagonal, smallest off-diagonal).
    """
    m11, m12, m22 = m[0, 0], m[0, 1], m[1, 1]

    def feasible(t):
        a, c = m11 + t, m22 + t
        return a >= 0 and c >= 0 and a * c >= max(abs(m12) - t, 0.0) ** 2

    lo, hi = 0.0, float(np.max(np.abs(m)))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def dense_marginal_ols(z, y):
    """Per-column simple regression of each y column on each z column with intercept."""
    n, p = z.shape
    m = y.shape[1]
    slope = np.zeros((p, m))
    se = np.zeros((p, m))
    for j in range(p):
        design = np.column_stack([np.ones(n), z[:, j]])
        xtx_inv = np.linalg.inv(design.T @ design)
        for c in range(m):
            coef, *_ = np.linalg.lstsq(design, y[:, c], rcond=None)
            resid = y[:, c] - design @ coef
            sigma2 = resid @ resid / (n - 2)
            slope[j, c] = coef[1]
            se[j, c] = np.sqrt(sigma2 * xtx_inv[1, 1])
    return slope, se


def dataset_arrays(ds):
    return ds.gamma_hat, ds.se_x, ds.gamma_outcome, ds.se_y


def population_design(covariance, p=60, seed=13):
    """Pi with Pi'Pi = covariance exactly (unit weights)."""
    covariance = np.asarray(covariance, dtype=float)
    k = covariance.shape[0]
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((p, k)))
    return q @ np.linalg.cholesky(covariance).T


def random_group_structure(rng, max_k=8, max_groups=3):
    """Random group-consistent beta: each exposure null or +-magnitude of its group."""
    k = int(rng.integers(2, max_k + 1))
    n_groups = int(rng.integers(1, max_groups + 1))
    magnitudes = 0.5 + 0.37 * np.arange(n_groups) + rng.uniform(0.0, 0.1, n_groups)
    labels = rng.integers(0, n_groups + 1, k)
    signs = rng.choice([-1.0, 1.0], k)
    return np.where(labels > 0, signs * magnitudes[np.maximum(labels - 1, 0)], 0.0)


# =============================================================================
# Executors
# =============================================================================

class InlineExecutor:
    """Drop-in for ProcessPoolExecutor that maps in the calling process."""

    def __init__(self, max_workers=None):
        self.max_workers = max_workers

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def map(self, fn, *iterables):
        return map(fn, *iterables)
