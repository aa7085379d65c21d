"""
Harmonized two-sample summary data and the design quantities built from it.

A dataset holds, for p SNPs and K exposures, the SNP-exposure estimates
gamma_hat (p x K) with standard errors se_x, the SNP-outcome estimates with
standard errors se_y, and the shared exposure correlation matrix Sigma.
Everything here is immutable once constructed.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from pacsmr.artifacts import atomic_path
from pacsmr.errors import (
    DimensionMismatchError,
    DuplicateSnpError,
    MalformedRowError,
    MissingValueError,
    NonPositiveSEError,
    ValidationError,
)

logger = logging.getLogger(__name__)

SNP_COLUMN = "snp"
OUTCOME_NAME = "outcome"
FLOAT_FORMAT = "%.17g"


def _frozen(values):
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


# =============================================================================
# Domain types
# =============================================================================

@dataclass(frozen=True)
class SnpAssociation:
    """One SNP's exposure and outcome association estimates."""
    snp_id: str
    gamma_hat: np.ndarray
    se_x: np.ndarray
    gamma_outcome_hat: float
    se_y: float


@dataclass(frozen=True, eq=False)
class SharedCorrelation:
    """Shared correlation Sigma of the exposure estimates (symmetric, unit diagonal, PD)."""
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DimensionMismatchError(f"correlation matrix must be square, got shape {sigma.shape}")
        if not np.all(np.isfinite(sigma)):
            raise MissingValueError("correlation matrix contains non-finite entries")
        if not np.allclose(sigma, sigma.T, atol=1e-10):
            raise ValidationError("correlation matrix is not symmetric")
        if not np.allclose(np.diag(sigma), 1.0, atol=1e-10):
            raise ValidationError("correlation matrix must have unit diagonal")
        sigma = (sigma + sigma.T) / 2
        np.fill_diagonal(sigma, 1.0)
        min_eig = np.linalg.eigvalsh(sigma)[0]
        if min_eig <= 0:
            raise ValidationError(
                f"correlation matrix is not positive definite (min eigenvalue {min_eig:.3g})")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def identity(cls, k):
        return cls(np.eye(k))

    @property
    def k(self):
        return self.sigma.shape[0]

    @cached_property
    def cholesky(self):
        """Lower Cholesky factor of Sigma."""
        return np.linalg.cholesky(self.sigma)


@dataclass(frozen=True, eq=False)
class SummaryDataset:
    """
    p SNPs by K exposures of harmonized summary statistics.

    Arrays are stored column-aligned with `exposure_names`; rows follow
    `snp_ids`. Use `snps` for per-SNP records.
    """
    snp_ids: tuple
    gamma_hat: np.ndarray
    se_x: np.ndarray
    gamma_outcome: np.ndarray
    se_y: np.ndarray
    correlation: SharedCorrelation
    exposure_names: tuple = field(default=())

    def __post_init__(self):
        gamma_hat = _frozen(self.gamma_hat)
        se_x = _frozen(self.se_x)
        gamma_outcome = _frozen(self.gamma_outcome).reshape(-1)
        se_y = _frozen(self.se_y).reshape(-1)
        gamma_outcome.setflags(write=False)
        se_y.setflags(write=False)
        if gamma_hat.ndim == 1:
            gamma_hat = gamma_hat.reshape(-1, 1)
            se_x = se_x.reshape(-1, 1)
            gamma_hat.setflags(write=False)
            se_x.setflags(write=False)
        p, k = gamma_hat.shape
        names = tuple(self.exposure_names) or tuple(f"exposure{i + 1}" for i in range(k))
        snp_ids = tuple(str(s) for s in self.snp_ids)

        if se_x.shape != (p, k):
            raise DimensionMismatchError(f"se_x has shape {se_x.shape}, expected {(p, k)}")
        if gamma_outcome.shape != (p,) or se_y.shape != (p,):
            raise DimensionMismatchError(f"outcome columns must have length {p}")
        if len(snp_ids) != p:
            raise DimensionMismatchError(f"{len(snp_ids)} snp ids for {p} rows")
        if len(names) != k:
            raise DimensionMismatchError(f"{len(names)} exposure names for {k} exposures")
        if self.correlation.k != k:
            raise DimensionMismatchError(
                f"correlation matrix is {self.correlation.k}x{self.correlation.k} "
                f"but the data has {k} exposures")
        if p <= k:
            raise ValidationError(f"need more SNPs than exposures (p={p}, K={k})")

        _check_values(gamma_hat, names, "beta")
        _check_values(gamma_outcome[:, None], (OUTCOME_NAME,), "beta")
        _check_standard_errors(se_x, names)
        _check_standard_errors(se_y[:, None], (OUTCOME_NAME,))

        seen = {}
        for row, snp in enumerate(snp_ids, start=1):
            if snp in seen:
                raise DuplicateSnpError(f"duplicate snp_id '{snp}' at rows {seen[snp]} and {row}")
            seen[snp] = row

        object.__setattr__(self, "snp_ids", snp_ids)
        object.__setattr__(self, "exposure_names", names)
        object.__setattr__(self, "gamma_hat", gamma_hat)
        object.__setattr__(self, "se_x", se_x)
        object.__setattr__(self, "gamma_outcome", gamma_outcome)
        object.__setattr__(self, "se_y", se_y)

    @classmethod
    def from_arrays(cls, gamma_hat, se_x, gamma_outcome, se_y, sigma=None,
                    snp_ids=None, exposure_names=()):
        gamma_hat = np.asarray(gamma_hat, dtype=float)
        p = gamma_hat.shape[0]
        k = 1 if gamma_hat.ndim == 1 else gamma_hat.shape[1]
        if snp_ids is None:
            snp_ids = [f"rs{i + 1}" for i in range(p)]
        if sigma is None:
            correlation = SharedCorrelation.identity(k)
        elif isinstance(sigma, SharedCorrelation):
            correlation = sigma
        else:
            correlation = SharedCorrelation(sigma)
        return cls(tuple(snp_ids), gamma_hat, se_x, gamma_outcome, se_y, correlation,
                   tuple(exposure_names))

    def with_values(self, gamma_hat, se_x, gamma_outcome, se_y):
        """Same SNPs, exposures and correlation with new estimates."""
        return replace(self, gamma_hat=gamma_hat, se_x=se_x,
                       gamma_outcome=gamma_outcome, se_y=se_y)

    @property
    def p(self):
        return self.gamma_hat.shape[0]

    @property
    def k(self):
        return self.gamma_hat.shape[1]

    @property
    def snps(self):
        return [
            SnpAssociation(self.snp_ids[j], self.gamma_hat[j], self.se_x[j],
                           float(self.gamma_outcome[j]), float(self.se_y[j]))
            for j in range(self.p)
        ]


def _check_values(values, names, prefix):
    bad = ~np.isfinite(values)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise MissingValueError(f"missing or non-finite value at row {row + 1} (column {prefix}_{names[col]})")


def _check_standard_errors(se, names):
    bad = ~np.isfinite(se)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise MissingValueError(f"missing or non-finite SE at row {row + 1} (column se_{names[col]})")
    bad = se <= 0
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise NonPositiveSEError(f"non-positive SE at row {row + 1} (column se_{names[col]})")


# =============================================================================
# Design quantities
# =============================================================================

@dataclass(frozen=True, eq=False)
class DesignQuantities:
    """
    Pi_hat, Gamma_hat, W = diag(se_y^-2), V = sum_j Sigma_Xj se_y_j^-2 and
    the per-SNP Sigma_Xj. W is kept as its diagonal (`weights`).
    """
    pi_hat: np.ndarray
    gamma_vec: np.ndarray
    weights: np.ndarray
    v: np.ndarray
    sigma_xj: np.ndarray

    @property
    def p(self):
        return self.pi_hat.shape[0]

    @property
    def k(self):
        return self.pi_hat.shape[1]

    @property
    def w(self):
        return np.diag(self.weights)

    @cached_property
    def v_per_snp(self):
        """V_j = Sigma_Xj * se_y_j^-2, shape (p, K, K)."""
        return self.sigma_xj * self.weights[:, None, None]

    @cached_property
    def normal_matrix(self):
        """Pi_hat^T W Pi_hat."""
        m = self.pi_hat.T @ (self.weights[:, None] * self.pi_hat)
        return (m + m.T) / 2

    @cached_property
    def rhs(self):
        """Pi_hat^T W Gamma_hat."""
        return self.pi_hat.T @ (self.weights * self.gamma_vec)

    @cached_property
    def debiased_matrix(self):
        """Pi_hat^T W Pi_hat - V (may be indefinite)."""
        m = self.normal_matrix - self.v
        return (m + m.T) / 2

    @cached_property
    def projection(self):
        from pacsmr.matrix_core import nearest_psd_maxnorm
        result = nearest_psd_maxnorm(self.debiased_matrix)
        if result.iterations:
            logger.info("debiased matrix projected to PSD cone (max-norm shift %.3g)", result.distance)
        return result

    @property
    def projected_matrix(self):
        """(Pi_hat^T W Pi_hat - V)_+ ."""
        return self.projection.matrix


def build_design(ds):
    """Assemble Pi_hat, Gamma_hat, W, V and Sigma_Xj from a dataset."""
    se_x = ds.se_x
    outer = se_x[:, :, None] * se_x[:, None, :]
    sigma_xj = outer * ds.correlation.sigma[None, :, :]
    weights = 1.0 / ds.se_y ** 2
    v = np.einsum("j,jkl->kl", weights, sigma_xj)
    v = (v + v.T) / 2
    return DesignQuantities(
        pi_hat=np.array(ds.gamma_hat),
        gamma_vec=np.array(ds.gamma_outcome),
        weights=weights,
        v=v,
        sigma_xj=sigma_xj,
    )


def exposure_correlation(ds, source="raw"):
    """
    Pearson correlation across SNPs between columns of Pi_hat.

    source="zscore" correlates gamma_hat / se_x instead of the raw columns.
    Zero-variance columns get 0 off-diagonal with a warning.
    """
    if ds.p < 3:
        raise ValidationError(f"need at least 3 SNPs to correlate exposures (p={ds.p})")
    if source == "raw":
        x = np.array(ds.gamma_hat)
    elif source == "zscore":
        x = ds.gamma_hat / ds.se_x
    else:
        raise ValidationError(f"unknown correlation source '{source}'")

    centered = x - x.mean(axis=0)
    norms = np.sqrt(np.sum(centered ** 2, axis=0))
    degenerate = norms <= 1e-300
    for col in np.flatnonzero(degenerate):
        logger.warning("exposure '%s' has zero variance across SNPs; correlation set to 0",
                       ds.exposure_names[col])
    safe = np.where(degenerate, 1.0, norms)
    r = (centered.T @ centered) / np.outer(safe, safe)
    r[degenerate, :] = 0.0
    r[:, degenerate] = 0.0
    r = np.clip((r + r.T) / 2, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


def rescale_exposures(ds, trait_sd):
    """Put exposures on unit-variance scale by dividing by their trait SDs."""
    trait_sd = np.asarray(trait_sd, dtype=float).reshape(-1)
    if trait_sd.shape != (ds.k,):
        raise DimensionMismatchError(f"trait SD vector has length {trait_sd.size}, expected {ds.k}")
    if np.any(~np.isfinite(trait_sd)) or np.any(trait_sd <= 0):
        raise ValidationError("trait SDs must be positive and finite")
    return ds.with_values(ds.gamma_hat / trait_sd, ds.se_x / trait_sd, ds.gamma_outcome, ds.se_y)


# =============================================================================
# File I/O
# =============================================================================

def _require_file(path, what):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{what} not found: {path}")
    return path


def _parse_header(columns):
    columns = list(columns)
    if not columns or columns[0] != SNP_COLUMN:
        raise MalformedRowError(f"header must start with '{SNP_COLUMN}', got '{columns[0] if columns else ''}'")
    if len(columns) < 5 or len(columns) % 2 == 0:
        raise MalformedRowError(f"header has {len(columns)} columns; expected snp plus beta/se pairs")
    if columns[-2:] != ["beta_outcome", "se_outcome"]:
        raise MalformedRowError("last two header columns must be 'beta_outcome se_outcome'")
    names = []
    for i in range(1, len(columns) - 2, 2):
        beta_col, se_col = columns[i], columns[i + 1]
        if not beta_col.startswith("beta_"):
            raise MalformedRowError(f"expected a beta_<name> column at header column {i + 1}, got '{beta_col}'")
        name = beta_col[len("beta_"):]
        if se_col != f"se_{name}":
            raise MalformedRowError(f"expected 'se_{name}' at header column {i + 2}, got '{se_col}'")
        names.append(name)
    return names


def _numeric_block(frame, columns):
    values = np.empty((len(frame), len(columns)))
    for c, col in enumerate(columns):
        raw = frame[col]
        parsed = pd.to_numeric(raw, errors="coerce")
        bad = parsed.isna() & raw.notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
            raise MalformedRowError(f"non-numeric value '{raw.iloc[row - 1]}' at row {row} (column {col})")
        missing = parsed.isna()
        if missing.any():
            row = int(np.flatnonzero(missing.to_numpy())[0]) + 1
            raise MissingValueError(f"missing value at row {row} (column {col})")
        values[:, c] = parsed.to_numpy(dtype=float)
    return values


def load_sigma(sigma_path, k):
    sigma_path = _require_file(sigma_path, "correlation file")
    try:
        sigma = np.loadtxt(sigma_path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise MalformedRowError(f"unreadable correlation file {sigma_path}: {exc}") from exc
    if sigma.shape != (k, k):
        raise DimensionMismatchError(
            f"correlation file is {sigma.shape[0]}x{sigma.shape[1]} but the data has {k} exposures")
    return SharedCorrelation(sigma)


def load_dataset(path, sigma_path=None, trait_sd_path=None):
    """
    Read a harmonized summary-statistics TSV (and optional Sigma CSV).

    Header: snp beta_<name1> se_<name1> ... beta_outcome se_outcome.
    Without `sigma_path` Sigma is the identity (logged as a warning).
    """
    path = _require_file(path, "summary statistics file")
    try:
        frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=True,
                            na_values=["", "NA", "NaN", "nan"], encoding="utf-8")
    except pd.errors.ParserError as exc:
        raise MalformedRowError(f"malformed row in {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise MalformedRowError(f"empty summary statistics file {path}") from exc

    names = _parse_header(frame.columns)
    k = len(names)
    if frame[SNP_COLUMN].isna().any():
        row = int(np.flatnonzero(frame[SNP_COLUMN].isna().to_numpy())[0]) + 1
        raise MissingValueError(f"missing snp id at row {row}")

    beta = _numeric_block(frame, [f"beta_{n}" for n in names])
    se = _numeric_block(frame, [f"se_{n}" for n in names])
    outcome = _numeric_block(frame, ["beta_outcome", "se_outcome"])

    if sigma_path is None:
        logger.warning("no correlation file given; assuming Sigma = identity (no sample overlap)")
        correlation = SharedCorrelation.identity(k)
    else:
        correlation = load_sigma(sigma_path, k)

    ds = SummaryDataset(
        snp_ids=tuple(frame[SNP_COLUMN]),
        gamma_hat=beta,
        se_x=se,
        gamma_outcome=outcome[:, 0],
        se_y=outcome[:, 1],
        correlation=correlation,
        exposure_names=tuple(names),
    )
    if trait_sd_path is not None:
        trait_sd_path = _require_file(trait_sd_path, "trait SD file")
        ds = rescale_exposures(ds, np.loadtxt(trait_sd_path, delimiter=",", ndmin=1))
    return ds


def dataset_frame(ds):
    """Dataset as a DataFrame in the on-disk column layout."""
    columns = {SNP_COLUMN: list(ds.snp_ids)}
    for k, name in enumerate(ds.exposure_names):
        columns[f"beta_{name}"] = ds.gamma_hat[:, k]
        columns[f"se_{name}"] = ds.se_x[:, k]
    columns["beta_outcome"] = ds.gamma_outcome
    columns["se_outcome"] = ds.se_y
    return pd.DataFrame(columns)


def write_dataset(ds, path, sigma_path=None):
    """Write the TSV (and optionally Sigma CSV) so load_dataset round-trips."""
    with atomic_path(path) as tmp:
        dataset_frame(ds).to_csv(tmp, sep="\t", index=False, float_format=FLOAT_FORMAT,
                                 lineterminator="\n")
    if sigma_path is not None:
        with atomic_path(sigma_path) as tmp:
            np.savetxt(tmp, ds.correlation.sigma, delimiter=",", fmt=FLOAT_FORMAT)
