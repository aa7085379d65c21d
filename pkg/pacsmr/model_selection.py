"""
Tuning grids and data-thinning cross-validation.

For every candidate (lambda, tau) the penalized fit is computed on each
training complement T_m = D - D_m and scored on the held-out fold D_m with
the projected debiased loss

    1/2 b' (Pi_m' W_m Pi_m - V_m)_+ b - Gamma_m' W_m Pi_m b.

Fits on a training complement use penalties scaled by its information
fraction (1 - eps_m), so the chosen values apply directly to the full data.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import pandas as pd

from pacsmr.errors import CrossValidationError, NumericalError, ValidationError
from pacsmr.estimators import (
    DEFAULT_LQA,
    LqaConfig,
    Method,
    PacsWeights,
    fit_dlasso,
    fit_dridge,
    fit_divw,
    fit_ivw,
    fit_ivw_lasso,
    fit_pacs,
    pacs_weights,
)
from pacsmr.matrix_core import instrument_strength
from pacsmr.summary_data import build_design, exposure_correlation
from pacsmr.thinning import ThinningPlan, sub_seed, thin_multi_fold, training_complement

logger = logging.getLogger(__name__)

DEFAULT_TAUS = (0.5, 1.0, 2.0, 3.0)


class SelectionRule(str, Enum):
    MIN = "min"
    ONE_SE = "1se"


@dataclass(frozen=True)
class SelectionConfig:
    grid_points: int = 25
    taus: tuple = DEFAULT_TAUS
    ridge_points: int = 25
    folds: int = 5
    repeats: int = 1
    rule: SelectionRule = SelectionRule.ONE_SE
    threshold: float = None
    refit_weights: bool = True
    correlation_source: str = "raw"
    whiten_strength: bool = True
    lqa: LqaConfig = DEFAULT_LQA
    threads: int = 1


DEFAULT_SELECTION = SelectionConfig()


@dataclass(frozen=True)
class TuningGrid:
    lambdas: np.ndarray
    taus: tuple
    base_rate: float

    def __post_init__(self):
        lambdas = np.sort(np.asarray(self.lambdas, dtype=float).reshape(-1))
        if lambdas.size == 0 or np.any(lambdas < 0):
            raise ValidationError("lambda grid must be non-empty and non-negative")
        taus = tuple(float(t) for t in self.taus)
        if not taus or any(t <= 0 for t in taus):
            raise ValidationError("taus must be positive")
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "taus", taus)


@dataclass(frozen=True)
class CvResult:
    table: pd.DataFrame
    chosen: tuple
    rule: SelectionRule
    diagnostics: list = field(default_factory=list, repr=False)

    @property
    def lam(self):
        return self.chosen[0]

    @property
    def tau(self):
        return self.chosen[1]

    def to_dict(self):
        return {
            "lambda": self.lam,
            "tau": self.tau,
            "rule": self.rule.value,
            "candidates": int(len(self.table)),
            "failed_fits": int(self.table["n_failed"].sum()),
        }


@dataclass(frozen=True)
class TunedFit:
    fit: object
    cv: CvResult = None
    phi: float = None
    strength: object = None
    beta_init: np.ndarray = None


# =============================================================================
# Grids
# =============================================================================

def lambda_base_rate(mu_min, p):
    if mu_min > p:
        return float((mu_min / np.sqrt(mu_min + p)) ** (2.0 / 3.0))
    return float((p / 2.0) ** (1.0 / 3.0))


def build_lambda_grid(strength, p, n_points=25, taus=DEFAULT_TAUS):
    """base_rate * 10^u for u evenly spaced on [-2, 2]."""
    if n_points < 2:
        raise ValidationError(f"need at least 2 grid points, got {n_points}")
    base = lambda_base_rate(strength.mu_min, p)
    return TuningGrid(base * np.logspace(-2, 2, n_points), taus, base)


def ridge_bound(mu_min, p):
    return float((max(mu_min, 0.0) + p) ** 0.4)


def ridge_grid(strength, p, n_points=25):
    """Log-spaced phi values on [B * 1e-4, B * 1e2]."""
    if n_points < 2:
        raise ValidationError(f"need at least 2 grid points, got {n_points}")
    return ridge_bound(strength.mu_min, p) * np.logspace(-4, 2, n_points)


def validation_loss(dq, beta):
    """Projected debiased loss of `beta` on a held-out fold."""
    return float(0.5 * beta @ dq.projected_matrix @ beta - dq.rhs @ beta)


def ivw_validation_loss(dq, beta):
    return float(0.5 * beta @ dq.normal_matrix @ beta - dq.rhs @ beta)


# =============================================================================
# Candidate choice
# =============================================================================

def choose_candidate(table, rule=SelectionRule.ONE_SE):
    """
    Pick (lambda, tau) from a table with columns lam, tau, mean_loss, se_loss.

    MIN takes the smallest mean loss; ONE_SE takes every candidate within one
    SE of that minimum, then the largest lambda, then the largest tau.
    """
    ok = table[np.isfinite(table["mean_loss"])]
    if ok.empty:
        raise CrossValidationError("no candidate produced a finite validation loss")
    best = ok["mean_loss"].min()
    if rule == SelectionRule.MIN:
        pool = ok[ok["mean_loss"] == best]
    else:
        at_min = ok[ok["mean_loss"] == best]
        se = float(np.nan_to_num(at_min["se_loss"].max(), nan=0.0))
        pool = ok[ok["mean_loss"] <= best + se]
    top_lam = pool["lam"].max()
    top_tau = pool.loc[pool["lam"] == top_lam, "tau"].max()
    return float(top_lam), float(top_tau)


# =============================================================================
# Per-fold work
# =============================================================================

def parse_method(name, threshold=None):
    """
    'pacs', 'pacs-0.8', 'dlasso', ... -> (Method, threshold).

    'pacs-x' takes its threshold from `threshold` and is rejected without one.
    """
    name = str(name).lower()
    if name.startswith("pacs-"):
        suffix = name[len("pacs-"):]
        if suffix == "x":
            if threshold is None:
                raise ValidationError("'pacs-x' needs a correlation threshold "
                                      "(name it as pacs-0.8 or pass --threshold)")
            value = float(threshold)
        else:
            try:
                value = float(suffix)
            except ValueError:
                raise ValidationError(f"unknown method '{name}'") from None
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"correlation threshold must lie in [0, 1], got {value}")
        return Method.PACS, value
    try:
        return Method(name), None
    except ValueError:
        raise ValidationError(f"unknown method '{name}'") from None


_PENALIZED = {
    Method.PACS: fit_pacs,
    Method.DLASSO: fit_dlasso,
    Method.IVW_LASSO: fit_ivw_lasso,
}


def _initial_estimate(ds, dq, method, phi, config):
    """Initial estimator and exposure correlations behind the adaptive weights."""
    if method == Method.IVW_LASSO:
        return fit_ivw(dq, with_variance=False).beta, None
    beta = fit_dridge(dq, phi).beta
    return beta, exposure_correlation(ds, config.correlation_source)


def _weights_for(method, beta_init, r_hat, tau, config):
    if method == Method.IVW_LASSO:
        return PacsWeights.lasso(np.ones(beta_init.size), tau)
    if method == Method.DLASSO:
        return PacsWeights.lasso(np.maximum(np.abs(beta_init), config.lqa.floor) ** -tau, tau)
    return pacs_weights(beta_init, r_hat, tau, config.threshold, config.lqa.floor)


def _fold_losses(ds, epsilons, seed, m, lambdas, taus, phi, method, config, fixed):
    reps = thin_multi_fold(ds, ThinningPlan(epsilons, seed))
    train = training_complement(ds, reps, m)
    dq_train = build_design(train)
    dq_valid = build_design(reps[m])
    shrink = 1.0 - epsilons[m]
    scorer = ivw_validation_loss if method == Method.IVW_LASSO else validation_loss
    fitter = _PENALIZED[method]

    if fixed is not None:
        beta_init, r_hat = fixed
    else:
        beta_init, r_hat = _initial_estimate(train, dq_train, method, phi * shrink, config)

    losses = np.full((len(taus), len(lambdas)), np.nan)
    problems = []
    for i, tau in enumerate(taus):
        weights = _weights_for(method, beta_init, r_hat, tau, config)
        for j, lam in enumerate(lambdas):
            # Every candidate starts from the initial estimate, whatever the grid order
            try:
                fit = fitter(dq_train, weights, lam * shrink, beta_init, config.lqa)
            except NumericalError as exc:
                problems.append({"fold": m, "lam": lam, "tau": tau, "error": str(exc)})
                continue
            if not fit.converged:
                problems.append({"fold": m, "lam": lam, "tau": tau, "error": "not converged"})
                continue
            losses[i, j] = scorer(dq_valid, fit.beta)
            logger.debug("fold %d lambda=%.4g tau=%g loss=%.6g", m, lam, tau, losses[i, j])
    return losses, problems


def _run_fold_task(args):
    return _fold_losses(*args)


def _map_tasks(tasks, threads):
    if threads is not None and threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(_run_fold_task, tasks))
    return [_run_fold_task(t) for t in tasks]


def _summarize(losses, lambdas, taus):
    """losses: (n_runs, n_tau, n_lambda) -> candidate table."""
    n_runs = losses.shape[0]
    rows = []
    for i, tau in enumerate(taus):
        for j, lam in enumerate(lambdas):
            values = losses[:, i, j]
            ok = np.isfinite(values)
            n_ok = int(ok.sum())
            if n_ok == n_runs:
                mean = float(values.mean())
                se = float(values.std(ddof=1) / np.sqrt(n_runs)) if n_runs > 1 else 0.0
            else:
                mean, se = float("nan"), float("nan")
            rows.append({"lam": float(lam), "tau": float(tau), "mean_loss": mean,
                         "se_loss": se, "n_ok": n_ok, "n_failed": n_runs - n_ok})
    return pd.DataFrame(rows)


# =============================================================================
# Cross-validation
# =============================================================================

def cv_ridge(ds, plan, config=DEFAULT_SELECTION, strength=None):
    """phi* minimizing the fold-averaged projected debiased loss of dRidge."""
    if strength is None:
        strength = instrument_strength(build_design(ds), whiten=config.whiten_strength)
    phis = ridge_grid(strength, ds.p, config.ridge_points)
    reps = thin_multi_fold(ds, plan)
    losses = np.zeros((plan.m, phis.size))
    for m in range(plan.m):
        dq_train = build_design(training_complement(ds, reps, m))
        dq_valid = build_design(reps[m])
        shrink = 1.0 - plan.epsilons[m]
        for i, phi in enumerate(phis):
            losses[m, i] = validation_loss(dq_valid, fit_dridge(dq_train, phi * shrink).beta)
    mean = losses.mean(axis=0)
    best = np.flatnonzero(mean == mean.min())[-1]
    return float(phis[best])


def cv_pacs(ds, grid, plan, repeats=1, rule=None, config=DEFAULT_SELECTION, phi=None,
            method=Method.PACS, fixed_init=None):
    """
    Repeated M-fold thinning CV over (lambda, tau).

    Repeat r re-thins with seed sub_seed(plan.seed, r). Candidate SE is the
    SD of the M * repeats fold losses over sqrt(M * repeats). With
    config.refit_weights False the adaptive weights come from `fixed_init`
    (full-data initial estimate and correlations) instead of each training set.
    """
    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    rule = SelectionRule(rule or config.rule)
    if method not in _PENALIZED:
        raise ValidationError(f"{method.value} has no tuning parameters")
    if phi is None and method != Method.IVW_LASSO:
        phi = cv_ridge(ds, plan, config)
    phi = 0.0 if phi is None else phi
    taus = (1.0,) if method == Method.IVW_LASSO else grid.taus

    fixed = None
    if not config.refit_weights:
        if fixed_init is None:
            fixed_init = _initial_estimate(ds, build_design(ds), method, phi, config)
        fixed = fixed_init

    tasks = [
        (ds, plan.epsilons, sub_seed(plan.seed, r), m, grid.lambdas, taus, phi, method, config, fixed)
        for r in range(repeats) for m in range(plan.m)
    ]
    results = _map_tasks(tasks, config.threads)
    losses = np.stack([losses for losses, _ in results])
    diagnostics = [problem for _, problems in results for problem in problems]
    table = _summarize(losses, grid.lambdas, taus)
    if not np.isfinite(table["mean_loss"]).any():
        raise CrossValidationError(
            f"all {len(table)} candidates failed in cross-validation", diagnostics=diagnostics)
    chosen = choose_candidate(table, rule)
    logger.info("cross-validation chose lambda=%.4g tau=%g (%s)", chosen[0], chosen[1], rule.value)
    return CvResult(table, chosen, rule, diagnostics)


def fit_tuned(ds, method, config=DEFAULT_SELECTION, seed=0):
    """
    End-to-end fit of one method with its tuning parameters chosen by CV.

    `method` is a Method or a name such as "pacs-0.8". Unpenalized methods
    are fitted directly (dRidge gets phi from cv_ridge).
    """
    if isinstance(method, str):
        method, threshold = parse_method(method, config.threshold)
        if threshold is not None:
            config = replace(config, threshold=threshold)
    dq = build_design(ds)
    if method == Method.IVW:
        return TunedFit(fit_ivw(dq))
    if method == Method.DIVW:
        return TunedFit(fit_divw(dq, with_variance=True))

    strength = instrument_strength(dq, whiten=config.whiten_strength)
    plan = ThinningPlan.even(config.folds, sub_seed(seed, 0))
    phi = None
    if method != Method.IVW_LASSO:
        phi = cv_ridge(ds, plan, config, strength)
    if method == Method.DRIDGE:
        return TunedFit(fit_dridge(dq, phi, with_variance=True), phi=phi, strength=strength)

    init = _initial_estimate(ds, dq, method, phi, config)
    grid = build_lambda_grid(strength, ds.p, config.grid_points, config.taus)
    cv_plan = ThinningPlan(plan.epsilons, sub_seed(seed, 1))
    cv = cv_pacs(ds, grid, cv_plan, config.repeats, config=config, phi=phi, method=method,
                 fixed_init=init)
    weights = _weights_for(method, init[0], init[1], cv.tau, config)
    fit = _PENALIZED[method](dq, weights, cv.lam, init[0], config.lqa)
    return TunedFit(fit, cv, phi, strength, init[0])
