"""
Monte Carlo data-generating process and experiment driver.

Two independent cohorts of n individuals share p SNPs with allele
frequencies drawn from U(maf_range):

    X_ik = Z_i' gamma_k + U_i + e_ik        (exposure cohort)
    Y_i  = std(X_i)' beta + U_i + E_i       (outcome cohort)

Genotypes are generated in row chunks and reduced to per-SNP sufficient
statistics, so the n x p genotype matrix never exists in memory. The
exposure associations are reported on the standardized exposure scale.

True associations are block sparse: 20% of SNPs act on all ten exposures,
40% on the first six and 40% on the last four, with correlated effects
inside each block.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import linalg
from tqdm import tqdm

from pacsmr.errors import NumericalError, PacsError, ValidationError
from pacsmr.estimators import SELECTION_THRESHOLD, Method
from pacsmr.grouping import (
    DEFAULT_PIPELINE,
    extract_signal_groups,
    post_selection_pipeline,
    single_threaded,
)
from pacsmr.matrix_core import instrument_strength
from pacsmr.model_selection import DEFAULT_SELECTION, fit_tuned, parse_method
from pacsmr.summary_data import SummaryDataset, build_design
from pacsmr.thinning import sub_seed

logger = logging.getLogger(__name__)

DEFAULT_BETA = (1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0)
DEFAULT_ESTIMATORS = ("ivw", "divw", "ivw-lasso", "dlasso", "pacs", "pacs-0.8")

# Exposure columns of the two effect clusters
CLUSTER1 = slice(0, 6)
CLUSTER2 = slice(6, 10)

# Null-SNP z-score correlation: |z| cutoff and minimum SNP count per pair
NULL_Z_CUTOFF = 1.96
MIN_NULL_SNPS = 20

SIGMA_MODES = ("null_z", "phenotypic", "identity")

# RNG stream keys
_GAMMA_STREAM = 0
_MAF_STREAM = 1
_EXPOSURE_COHORT = 2
_OUTCOME_COHORT = 3


@dataclass(frozen=True)
class DgpConfig:
    """
    Simulation design. `sigma_gamma` is the variance scale of the true SNP
    effects when gamma_scale="variance" (default, about 2% heritability per
    exposure) or their standard deviation when gamma_scale="sd".
    """
    n: int = 100_000
    p: int = 500
    beta_true: tuple = DEFAULT_BETA
    sigma_gamma: float = 1e-3
    gamma_scale: str = "variance"
    sigma_u: float = 2.0
    sigma_e: float = 1.0
    block_fractions: tuple = (0.2, 0.4, 0.4)
    rho_strong: float = 0.995
    rho_moderate: float = 0.9
    cross_cluster1: float = 0.5
    rho_cluster2: float = 0.3
    cross_clusters: float = 0.3
    maf_range: tuple = (0.01, 0.5)
    seed: int = 2024
    sigma_mode: str = "phenotypic"
    standardize: bool = True
    chunk_size: int = 5000

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta_true)
        object.__setattr__(self, "beta_true", beta)
        if len(beta) != 10:
            raise ValidationError(f"the design has 10 exposures, got {len(beta)} true effects")
        if self.p <= len(beta):
            raise ValidationError(f"need more SNPs than exposures (p={self.p})")
        if self.n < 3:
            raise ValidationError(f"sample size must be at least 3, got {self.n}")
        if not self.sigma_gamma > 0:
            raise ValidationError(f"sigma_gamma must be positive, got {self.sigma_gamma}")
        if self.sigma_u < 0 or self.sigma_e < 0:
            raise ValidationError("sigma_u and sigma_e must be non-negative")
        if self.gamma_scale not in ("variance", "sd"):
            raise ValidationError(f"gamma_scale must be 'variance' or 'sd', got '{self.gamma_scale}'")
        if len(self.block_fractions) != 3 or abs(sum(self.block_fractions) - 1.0) > 1e-12:
            raise ValidationError(f"block fractions must be three values summing to 1, got {self.block_fractions}")
        if any(f < 0 for f in self.block_fractions):
            raise ValidationError("block fractions must be non-negative")
        lo, hi = self.maf_range
        if not 0 < lo <= hi <= 0.5:
            raise ValidationError(f"allele frequency range must lie in (0, 0.5], got {self.maf_range}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValidationError(f"sigma mode must be one of {SIGMA_MODES}, got '{self.sigma_mode}'")
        if self.chunk_size < 1:
            raise ValidationError(f"chunk size must be positive, got {self.chunk_size}")

    @property
    def k(self):
        return len(self.beta_true)

    @property
    def gamma_variance(self):
        return self.sigma_gamma if self.gamma_scale == "variance" else self.sigma_gamma ** 2

    def block_sizes(self):
        """Rows in the all / first-six / last-four blocks."""
        n_all = int(round(self.block_fractions[0] * self.p))
        n_first = int(round(self.block_fractions[1] * self.p))
        return n_all, n_first, self.p - n_all - n_first


# =============================================================================
# True associations
# =============================================================================

def _stream(seed, *keys):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=keys)))


def compound_symmetry(rho, k):
    """k x k matrix with unit diagonal and rho elsewhere."""
    m = np.full((k, k), float(rho))
    np.fill_diagonal(m, 1.0)
    return m


def cluster_covariance(cfg):
    """(Sigma_cluster1 6x6, Sigma_cluster2 4x4, Sigma_all 10x10)."""
    c1 = np.full((6, 6), cfg.cross_cluster1)
    c1[:3, :3] = compound_symmetry(cfg.rho_strong, 3)
    c1[3:, 3:] = compound_symmetry(cfg.rho_moderate, 3)
    c2 = compound_symmetry(cfg.rho_cluster2, 4)
    full = np.full((10, 10), cfg.cross_clusters)
    full[CLUSTER1, CLUSTER1] = c1
    full[CLUSTER2, CLUSTER2] = c2
    for name, m in (("cluster 1", c1), ("cluster 2", c2), ("full", full)):
        min_eig = linalg.eigvalsh(m)[0]
        if min_eig <= 0:
            raise ValidationError(f"{name} effect covariance is not positive definite "
                                  f"(min eigenvalue {min_eig:.3g})")
    return c1, c2, full


def generate_true_gammas(cfg, seed=None):
    """p x K true SNP-exposure effects, fixed across replicates."""
    seed = cfg.seed if seed is None else seed
    rng = _stream(seed, _GAMMA_STREAM)
    c1, c2, full = cluster_covariance(cfg)
    n_all, n_first, n_last = cfg.block_sizes()
    scale = cfg.gamma_variance

    gammas = np.zeros((cfg.p, cfg.k))
    gammas[:n_all] = rng.multivariate_normal(np.zeros(10), scale * full, size=n_all, method="cholesky")
    rows = slice(n_all, n_all + n_first)
    gammas[rows, CLUSTER1] = rng.multivariate_normal(np.zeros(6), scale * c1, size=n_first,
                                                     method="cholesky")
    rows = slice(n_all + n_first, cfg.p)
    gammas[rows, CLUSTER2] = rng.multivariate_normal(np.zeros(4), scale * c2, size=n_last,
                                                     method="cholesky")
    return gammas


def draw_allele_frequencies(cfg, seed=None):
    seed = cfg.seed if seed is None else seed
    lo, hi = cfg.maf_range
    return _stream(seed, _MAF_STREAM).uniform(lo, hi, size=cfg.p)


def heritability(gammas, mafs, sigma_u, sigma_e):
    """Share of each exposure's variance explained by the SNPs."""
    het = 2 * mafs * (1 - mafs)
    genetic = np.sum(gammas ** 2 * het[:, None], axis=0)
    return genetic / (genetic + sigma_u ** 2 + sigma_e ** 2)


# =============================================================================
# Individual-level generator with streaming sufficient statistics
# =============================================================================

@dataclass(frozen=True)
class CohortMoments:
    """Sums over individuals of z, z^2, z*t per SNP and of t, t t' over traits t."""
    n: int
    sum_z: np.ndarray
    sum_zz: np.ndarray
    sum_zt: np.ndarray
    sum_t: np.ndarray
    cross_t: np.ndarray

    def covariance(self):
        """Sample covariance of the traits."""
        centered = self.cross_t - np.outer(self.sum_t, self.sum_t) / self.n
        return centered / (self.n - 1)

    def combine(self, w, offset=0.0):
        """Sufficient statistics of y = t'w - offset: (sum_zy, sum_y, sum_yy)."""
        w = np.asarray(w, dtype=float)
        sum_y = self.sum_t @ w - self.n * offset
        sum_zy = self.sum_zt @ w - self.sum_z * offset
        sum_yy = w @ self.cross_t @ w - 2 * offset * (self.sum_t @ w) + self.n * offset ** 2
        return sum_zy, sum_y, sum_yy


def simulate_individuals(gammas, mafs, n, sigma_u, sigma_e, seed, cohort, outcome=False,
                         chunk_size=5000):
    """
    Yield (genotypes, traits) chunks for one cohort.

    Traits are the K exposures, plus U + E as a last column when `outcome`
    is set. The stream is keyed by (seed, cohort) and depends on chunk_size.
    """
    rng = _stream(seed, cohort)
    p, k = gammas.shape
    for start in range(0, n, chunk_size):
        b = min(chunk_size, n - start)
        z = rng.binomial(2, mafs, size=(b, p)).astype(float)
        u = sigma_u * rng.standard_normal(b)
        x = z @ gammas + u[:, None] + sigma_e * rng.standard_normal((b, k))
        if outcome:
            x = np.column_stack([x, u + sigma_e * rng.standard_normal(b)])
        yield z, x


def accumulate_moments(chunks):
    n = 0
    sums = None
    for z, t in chunks:
        if sums is None:
            p, m = z.shape[1], t.shape[1]
            sums = [np.zeros(p), np.zeros(p), np.zeros((p, m)), np.zeros(m), np.zeros((m, m))]
        n += z.shape[0]
        sums[0] += z.sum(axis=0)
        sums[1] += np.einsum("ij,ij->j", z, z)
        sums[2] += z.T @ t
        sums[3] += t.sum(axis=0)
        sums[4] += t.T @ t
    if sums is None:
        raise ValidationError("cohort has no individuals")
    return CohortMoments(n, *sums)


def marginal_ols(n, sum_z, sum_zz, sum_zy, sum_y, sum_yy):
    """
    Per-SNP simple regression slopes and standard errors from sums.

    sum_zy is p x m, sum_y and sum_yy have length m. Monomorphic SNPs raise
    NumericalError.
    """
    szz = sum_zz - sum_z ** 2 / n
    if np.any(szz <= 0):
        raise NumericalError(f"{int(np.sum(szz <= 0))} monomorphic SNPs; increase n or the allele frequency range")
    szy = sum_zy - np.outer(sum_z, sum_y) / n
    syy = sum_yy - sum_y ** 2 / n
    slope = szy / szz[:, None]
    rss = np.maximum(syy[None, :] - slope * szy, 0.0)
    se = np.sqrt(rss / (n - 2) / szz[:, None])
    return slope, se


def exposure_associations(moments, standardize=True):
    """(slope, se, sd) of the exposures on each SNP; sd is the cohort trait SD."""
    slope, se = marginal_ols(moments.n, moments.sum_z, moments.sum_zz, moments.sum_zt,
                             moments.sum_t, np.diag(moments.cross_t))
    sd = np.sqrt(np.diag(moments.covariance()))
    if standardize:
        return slope / sd, se / sd, sd
    return slope, se, sd


def outcome_associations(moments, beta, standardize=True):
    """Outcome Y = std(X)'beta + U + E regressed on each SNP, from outcome-cohort sums."""
    k = len(beta)
    beta = np.asarray(beta, dtype=float)
    if standardize:
        mean = moments.sum_t[:k] / moments.n
        coef = beta / np.sqrt(np.diag(moments.covariance())[:k])
        offset = float(coef @ mean)
    else:
        coef, offset = beta, 0.0
    sum_zy, sum_y, sum_yy = moments.combine(np.append(coef, 1.0), offset)
    slope, se = marginal_ols(moments.n, moments.sum_z, moments.sum_zz, sum_zy[:, None],
                             np.atleast_1d(sum_y), np.atleast_1d(sum_yy))
    return slope[:, 0], se[:, 0]


def _correlation_from_cov(cov):
    sd = np.sqrt(np.diag(cov))
    r = cov / np.outer(sd, sd)
    r = (r + r.T) / 2
    np.fill_diagonal(r, 1.0)
    return r


def _nearest_correlation(r, min_eig=1e-6):
    vals, vecs = linalg.eigh((r + r.T) / 2)
    if vals[0] >= min_eig:
        return r
    fixed = (vecs * np.maximum(vals, min_eig)) @ vecs.T
    return _correlation_from_cov(fixed)


def null_z_correlation(gamma_hat, se_x, fallback, null_mask=None):
    """
    Pairwise correlation of z-scores over SNPs with |z| < 1.96 for both
    exposures. Pairs with too few such SNPs use `fallback`.

    `null_mask` (p x K, True where a SNP has no effect on the exposure)
    further restricts the SNPs when the true effects are known.
    """
    z = gamma_hat / se_x
    k = z.shape[1]
    null = np.abs(z) < NULL_Z_CUTOFF
    if null_mask is not None:
        null_mask = np.asarray(null_mask, dtype=bool)
        if null_mask.shape != z.shape:
            raise ValidationError(f"null mask has shape {null_mask.shape}, z-scores {z.shape}")
        null &= null_mask
    r = np.array(fallback, dtype=float)
    for a in range(k):
        for b in range(a + 1, k):
            mask = null[:, a] & null[:, b]
            if mask.sum() < MIN_NULL_SNPS:
                logger.debug("exposures %d/%d: %d null SNPs, using fallback", a, b, mask.sum())
                continue
            r[a, b] = r[b, a] = np.corrcoef(z[mask, a], z[mask, b])[0, 1]
    np.fill_diagonal(r, 1.0)
    return _nearest_correlation(r)


def _resolve_sigma(mode, gamma_hat, se_x, phenotypic, null_mask=None):
    if mode == "identity":
        return np.eye(gamma_hat.shape[1])
    if mode == "phenotypic":
        return _nearest_correlation(phenotypic)
    return null_z_correlation(gamma_hat, se_x, phenotypic, null_mask)


def _exposure_names(k):
    return tuple(f"RF{i + 1}" for i in range(k))


def simulate_summary_stats(cfg, gammas, replicate_seed, mafs=None):
    """One replicate of two-sample summary statistics from individual-level data."""
    mafs = draw_allele_frequencies(cfg) if mafs is None else mafs
    exposure = accumulate_moments(simulate_individuals(
        gammas, mafs, cfg.n, cfg.sigma_u, cfg.sigma_e, replicate_seed, _EXPOSURE_COHORT,
        outcome=False, chunk_size=cfg.chunk_size))
    outcome = accumulate_moments(simulate_individuals(
        gammas, mafs, cfg.n, cfg.sigma_u, cfg.sigma_e, replicate_seed, _OUTCOME_COHORT,
        outcome=True, chunk_size=cfg.chunk_size))

    gamma_hat, se_x, _ = exposure_associations(exposure, cfg.standardize)
    gamma_outcome, se_y = outcome_associations(outcome, cfg.beta_true, cfg.standardize)
    phenotypic = _correlation_from_cov(exposure.covariance())
    sigma = _resolve_sigma(cfg.sigma_mode, gamma_hat, se_x, phenotypic, null_mask=gammas == 0)
    return SummaryDataset.from_arrays(gamma_hat, se_x, gamma_outcome, se_y, sigma,
                                      exposure_names=_exposure_names(cfg.k))


def population_moments(cfg, gammas, mafs):
    """Exposure covariance, trait SDs and per-allele outcome effects implied by the design."""
    het = 2 * mafs * (1 - mafs)
    k = cfg.k
    cov_x = gammas.T @ (het[:, None] * gammas) + cfg.sigma_u ** 2 * np.ones((k, k)) \
        + cfg.sigma_e ** 2 * np.eye(k)
    sd = np.sqrt(np.diag(cov_x)) if cfg.standardize else np.ones(k)
    coef = np.asarray(cfg.beta_true) / sd
    var_y = coef @ cov_x @ coef + 2 * cfg.sigma_u ** 2 * coef.sum() + cfg.sigma_u ** 2 + cfg.sigma_e ** 2
    return cov_x, sd, gammas @ coef, var_y


def simulate_summary_fast(cfg, gammas, mafs, seed):
    """
    Summary-level shortcut: gamma_hat_j ~ N(gamma_j, Sigma_Xj) and
    Gamma_hat_j ~ N(Gamma_j, s_Yj^2) with the sampling variances implied by
    the design. Sigma is the exposure correlation.
    """
    het = 2 * mafs * (1 - mafs)
    cov_x, sd, gamma_y, var_y = population_moments(cfg, gammas, mafs)
    corr = _correlation_from_cov(cov_x)
    resid_x = np.diag(cov_x)[None, :] - gammas ** 2 * het[:, None]
    se_x = np.sqrt(resid_x / (cfg.n * het[:, None])) / sd
    se_y = np.sqrt((var_y - gamma_y ** 2 * het) / (cfg.n * het))

    chol = np.linalg.cholesky(corr)
    noise_x = _stream(seed, _EXPOSURE_COHORT).standard_normal((cfg.p, cfg.k)) @ chol.T
    noise_y = _stream(seed, _OUTCOME_COHORT).standard_normal(cfg.p)
    gamma_hat = gammas / sd + se_x * noise_x
    gamma_outcome = gamma_y + se_y * noise_y
    sigma = np.eye(cfg.k) if cfg.sigma_mode == "identity" else corr
    return SummaryDataset.from_arrays(gamma_hat, se_x, gamma_outcome, se_y, sigma,
                                      exposure_names=_exposure_names(cfg.k))


# =============================================================================
# Metrics
# =============================================================================

@dataclass(frozen=True)
class ReplicateMetrics:
    mse: float
    sse: float
    correct_sparsity: float
    sensitivity: float
    fpr: float
    pattern: tuple

    def to_dict(self):
        out = asdict(self)
        out["pattern"] = "".join(self.pattern)
        return out


def compute_metrics(beta_hat, beta_true, selected=None):
    """
    Estimation error and selection accuracy of one fit. `mse` averages the
    squared error over exposures and `sse` sums it.

    A true positive needs the right sign as well as |beta_hat| > 0.001 (or
    the `selected` mask when given, e.g. Bonferroni for unpenalized fits).
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_true = np.asarray(beta_true, dtype=float)
    if beta_hat.shape != beta_true.shape:
        raise ValidationError(f"estimate has shape {beta_hat.shape}, truth {beta_true.shape}")
    if selected is None:
        selected = np.abs(beta_hat) > SELECTION_THRESHOLD
    selected = np.asarray(selected, dtype=bool)
    signal = beta_true != 0

    true_pos = selected & signal & (np.sign(beta_hat) == np.sign(beta_true))
    true_neg = ~selected & ~signal
    false_pos = selected & ~signal
    k = beta_true.size
    n_signal, n_null = int(signal.sum()), int((~signal).sum())
    pattern = tuple("+" if s and b > 0 else "-" if s else "0" for s, b in zip(selected, beta_hat))
    sq_error = (beta_hat - beta_true) ** 2
    return ReplicateMetrics(
        mse=float(np.mean(sq_error)),
        sse=float(np.sum(sq_error)),
        correct_sparsity=float((true_pos.sum() + true_neg.sum()) / k),
        sensitivity=float(true_pos.sum() / n_signal) if n_signal else float("nan"),
        fpr=float(false_pos.sum() / n_null) if n_null else float("nan"),
        pattern=pattern,
    )


# =============================================================================
# Experiment drivers
# =============================================================================

@dataclass(frozen=True)
class ExperimentResult:
    records: pd.DataFrame
    summary: pd.DataFrame
    config: dict = field(default_factory=dict)


SUMMARY_COLUMNS = ["estimator", "n", "median_mse", "median_sse", "correct_sparsity",
                   "sensitivity", "false_positive", "failure_rate", "replicates"]


GENERATORS = ("individual", "fast")


def simulate_replicate(cfg, gammas, mafs, replicate_seed, generator="individual"):
    if generator == "individual":
        return simulate_summary_stats(cfg, gammas, replicate_seed, mafs)
    if generator == "fast":
        return simulate_summary_fast(cfg, gammas, mafs, replicate_seed)
    raise ValidationError(f"unknown generator '{generator}' (expected one of {GENERATORS})")


def _fit_one(ds, name, selection, seed, beta_true):
    method, _ = parse_method(name, selection.threshold)
    tuned = fit_tuned(ds, name, selection, seed)
    fit = tuned.fit
    mask = fit.bonferroni_selected() if method in (Method.IVW, Method.DIVW) else None
    metrics = compute_metrics(fit.beta, beta_true, mask)
    return {**metrics.to_dict(), "converged": bool(fit.converged),
            "lambda": fit.lam, "tau": fit.tau, "beta": fit.beta.tolist()}


def _failed_record(exc):
    return {"mse": np.nan, "sse": np.nan, "correct_sparsity": np.nan, "sensitivity": np.nan,
            "fpr": np.nan, "pattern": None, "converged": False, "lambda": None, "tau": None,
            "beta": None, "error": f"{type(exc).__name__}: {exc}"}


def _replicate_task(args):
    """Top-level so ProcessPoolExecutor can pickle it."""
    cfg, gammas, mafs, estimators, selection, seed, replicate, generator = args
    replicate_seed = sub_seed(seed, replicate)
    base = {"replicate": replicate, "n": cfg.n}
    try:
        ds = simulate_replicate(cfg, gammas, mafs, replicate_seed, generator)
        strength = instrument_strength(build_design(ds), whiten=True).is_param
    except PacsError as exc:
        logger.warning("replicate %d: data generation failed: %s", replicate, exc)
        return [{**base, "estimator": name, "is_param": np.nan, **_failed_record(exc)}
                for name in estimators]

    records = []
    for i, name in enumerate(estimators):
        row = {**base, "estimator": name, "is_param": strength}
        try:
            row.update(_fit_one(ds, name, selection, sub_seed(replicate_seed, i), cfg.beta_true))
            row["error"] = None
        except PacsError as exc:
            logger.warning("replicate %d, %s failed: %s", replicate, name, exc)
            row.update(_failed_record(exc))
        records.append(row)
    return records


def _pooled(threads, replicates):
    return threads is not None and threads > 1 and replicates > 1


def _map_replicates(task, tasks, threads, progress, desc):
    if _pooled(threads, len(tasks)):
        with ProcessPoolExecutor(max_workers=threads) as executor:
            return list(tqdm(executor.map(task, tasks), total=len(tasks),
                             disable=not progress, desc=desc))
    return [task(t) for t in tqdm(tasks, disable=not progress, desc=desc)]


def summarize_records(records, estimators, n):
    rows = []
    for name in estimators:
        sub = records[records["estimator"] == name]
        ok = sub[sub["error"].isna()]
        rows.append({
            "estimator": name,
            "n": n,
            "median_mse": float(ok["mse"].median()) if len(ok) else np.nan,
            "median_sse": float(ok["sse"].median()) if len(ok) else np.nan,
            "correct_sparsity": float(ok["correct_sparsity"].mean()) if len(ok) else np.nan,
            "sensitivity": float(ok["sensitivity"].mean()) if len(ok) else np.nan,
            "false_positive": float(ok["fpr"].mean()) if len(ok) else np.nan,
            "failure_rate": 1.0 - len(ok) / len(sub) if len(sub) else np.nan,
            "replicates": len(sub),
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def run_experiment(cfg, estimators=DEFAULT_ESTIMATORS, replicates=100, seed=0,
                   selection=DEFAULT_SELECTION, threads=1, generator="individual",
                   progress=False):
    """
    Monte Carlo comparison of estimators. True effects and allele
    frequencies come from cfg.seed; replicate r uses sub_seed(seed, r).
    """
    if replicates < 1:
        raise ValidationError(f"need at least one replicate, got {replicates}")
    if generator not in GENERATORS:
        raise ValidationError(f"unknown generator '{generator}' (expected one of {GENERATORS})")
    estimators = tuple(estimators)
    for name in estimators:
        parse_method(name, selection.threshold)
    if _pooled(threads, replicates):
        selection = replace(selection, threads=1)
    gammas = generate_true_gammas(cfg)
    mafs = draw_allele_frequencies(cfg)
    tasks = [(cfg, gammas, mafs, estimators, selection, seed, r, generator)
             for r in range(replicates)]
    nested = _map_replicates(_replicate_task, tasks, threads, progress, "replicates")
    records = pd.DataFrame([row for rows in nested for row in rows])
    summary = summarize_records(records, estimators, cfg.n)
    logger.info("simulation n=%d: %d replicates, mean strength parameter %.3g",
                cfg.n, replicates, records.groupby("replicate")["is_param"].first().mean())
    return ExperimentResult(records, summary, asdict(cfg))


def _pipeline_task(args):
    cfg, gammas, mafs, pipeline, seed, replicate, generator, truth = args
    replicate_seed = sub_seed(seed, replicate)
    row = {"replicate": replicate, "n": cfg.n}
    try:
        ds = simulate_replicate(cfg, gammas, mafs, replicate_seed, generator)
        result = post_selection_pipeline(ds, pipeline, sub_seed(replicate_seed, 1))
    except PacsError as exc:
        logger.warning("replicate %d: pipeline failed: %s", replicate, exc)
        return {**row, "status": "failed", "labels": None, "true_grouping": False,
                "error": f"{type(exc).__name__}: {exc}"}

    labels = result.selection.label_string()
    metrics = compute_metrics(result.fit.beta, cfg.beta_true)
    row.update({"status": result.status, "labels": labels,
                "true_grouping": labels == truth.label_string(),
                "mse": metrics.mse, "sse": metrics.sse,
                "correct_sparsity": metrics.correct_sparsity,
                "sensitivity": metrics.sensitivity, "fpr": metrics.fpr, "error": None})
    if row["true_grouping"] and result.inference is not None:
        target = truth.c_g @ np.asarray(cfg.beta_true)
        inf = result.inference
        for l in range(truth.n_groups):
            row[f"estimate_{l + 1}"] = float(inf.group_estimates[l])
            row[f"covered_{l + 1}"] = bool(inf.ci_low[l] <= target[l] <= inf.ci_high[l])
        row["grouped_is_param"] = inf.strength.is_param if inf.strength is not None else np.nan
    return row


@dataclass(frozen=True)
class PipelineExperimentResult:
    records: pd.DataFrame
    frequencies: pd.DataFrame
    coverage: pd.DataFrame
    selection: dict


def run_pipeline_experiment(cfg, replicates=100, seed=0, pipeline=DEFAULT_PIPELINE, threads=1,
                            generator="individual", progress=False):
    """
    Selection, grouping and post-selection coverage of the full pipeline.

    Coverage is over replicates that recover the true grouping; the target
    of group l is (C_g beta)_l.
    """
    if replicates < 1:
        raise ValidationError(f"need at least one replicate, got {replicates}")
    if generator not in GENERATORS:
        raise ValidationError(f"unknown generator '{generator}' (expected one of {GENERATORS})")
    gammas = generate_true_gammas(cfg)
    mafs = draw_allele_frequencies(cfg)
    if _pooled(threads, replicates):
        pipeline = single_threaded(pipeline)
    truth = extract_signal_groups(np.asarray(cfg.beta_true))
    tasks = [(cfg, gammas, mafs, pipeline, seed, r, generator, truth) for r in range(replicates)]
    records = pd.DataFrame(_map_replicates(_pipeline_task, tasks, threads, progress, "pipelines"))

    done = records[records["labels"].notna()]
    counts = done["labels"].value_counts()
    frequencies = pd.DataFrame({
        "labels": counts.index,
        "count": counts.values,
        "frequency": counts.values / len(records),
    })

    hits = records[records["true_grouping"]]
    coverage_rows = []
    target = truth.c_g @ np.asarray(cfg.beta_true)
    for l in range(truth.n_groups):
        col = f"covered_{l + 1}"
        covered = hits[col].dropna() if col in hits else pd.Series(dtype=float)
        coverage_rows.append({
            "group": l + 1,
            "members": ";".join(f"RF{m + 1}" for m in truth.groups[l].members),
            "target": float(target[l]),
            "runs": int(covered.size),
            "coverage": float(covered.mean()) if covered.size else np.nan,
        })
    coverage = pd.DataFrame(coverage_rows, columns=["group", "members", "target", "runs", "coverage"])
    selection = {
        "true_labels": truth.label_string(),
        "true_grouping_rate": float(records["true_grouping"].mean()),
        "failure_rate": float((records["status"] == "failed").mean()),
        "median_mse": float(done["mse"].median()) if len(done) else None,
        "median_sse": float(done["sse"].median()) if len(done) else None,
        "correct_sparsity": float(done["correct_sparsity"].mean()) if len(done) else None,
        "sensitivity": float(done["sensitivity"].mean()) if len(done) else None,
        "false_positive": float(done["fpr"].mean()) if len(done) else None,
    }
    return PipelineExperimentResult(records, frequencies, coverage, selection)


# Column headers of metrics.csv
TABLE_HEADERS = {
    "estimator": "Estimator",
    "n": "N",
    "median_mse": "MSE",
    "median_sse": "Squared Error",
    "correct_sparsity": "Correct Sparsity",
    "sensitivity": "Sensitivity",
    "false_positive": "False Positive",
    "failure_rate": "Failure Rate",
    "replicates": "Replicates",
}
