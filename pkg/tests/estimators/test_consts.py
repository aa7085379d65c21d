"""
Shared constants for estimator and matrix tests.
"""

# =============================================================================
# Test Tolerances
# =============================================================================

# Closed-form estimators on exact data: only float64 rounding separates them
# from the truth (condition numbers here stay below ~1e3)
EXACT_TOLERANCE = 1e-10

# Two algebraically identical code paths (dRidge at phi=0 vs dIVW)
IDENTICAL_TOLERANCE = 1e-12

# LQA stops when no coordinate moves more than 1e-6; fused values also carry
# the L1 shift lambda/2 * w, so compare penalized solutions to 1e-3
LQA_TOLERANCE = 1e-3

# Objective may rise by at most the floor-induced slack per iteration
DESCENT_SLACK = 1e-7

# ADMM stops at relative residual ~1e-6 on the max-norm-scaled problem;
# distances of the best iterate are compared to 1e-3
ADMM_DISTANCE_TOLERANCE = 1e-3

# Eigenvalues of a projected matrix may dip below zero by rounding only
PSD_ROUNDING = 1e-8


# =============================================================================
# Test Configurations
# =============================================================================

RIDGE_PENALTIES = [1.0, 10.0, 100.0]
TAUS = [0.5, 1.0, 2.0, 3.0]

# Penalty scale for the correlated LQA descent check (A has diagonal ~7.5e3)
LQA_LAMBDA = 100.0

# Random perturbations tried around a penalized optimum
PERTURBATIONS = 1000

# A perturbed objective may undercut the LQA optimum by rounding only
OPTIMALITY_SLACK = 1e-6

# Random symmetric matrices checked against the small-matrix oracles
ORACLE_DRAWS = 200
