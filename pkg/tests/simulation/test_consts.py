"""
Shared constants for simulation tests.
"""
from pacsmr.simulation import DgpConfig

# =============================================================================
# Test Tolerances
# =============================================================================

# Streaming sums against per-SNP lstsq on n=50 individuals
OLS_RTOL = 1e-8
OLS_ATOL = 1e-10

# Moment checks on the true effects of a p=5000 design (1000 rows in the
# shared block): sample variance SD ~4.5%, correlation SD well below 0.01
GAMMA_VARIANCE_RTOL = 0.15
GAMMA_CORRELATION_TOLERANCE = 0.02

# Per-exposure heritability of the default design is about 2%
HERITABILITY_RANGE = (0.012, 0.03)

# z-score correlation over ~2700 independent null SNPs (SD ~0.02)
NULL_CORRELATION_TOLERANCE = 0.06

# Sample exposure correlation on n=2000 individuals (SD below 0.02)
PHENOTYPIC_CORRELATION_TOLERANCE = 0.05


# =============================================================================
# Test Configurations
# =============================================================================

# Small designs that simulate in well under a second
TINY_DGP = DgpConfig(n=2000, p=30, chunk_size=500, seed=7)
SMALL_DGP = DgpConfig(n=20000, p=60, seed=7)
MOMENT_DGP = DgpConfig(p=5000, seed=7)

SMALL_ESTIMATORS = ("ivw", "divw", "dlasso")
