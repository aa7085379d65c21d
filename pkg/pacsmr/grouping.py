"""
Signal groups and post-selection inference on them.

A signal group is a set of exposures whose nonzero estimates share one
magnitude. For L groups:

    C_g[l, k] = sbar_l * s_k / |G_l|     (maps beta to group effects)
    G[l, k]   = sbar_l * s_k             (sums/differences associations)

with s_k the sign of exposure k and sbar_l the sign of the group's
smallest-index member. For beta consistent with the groups G' C_g beta = beta.
"""
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import pandas as pd
from scipy.stats import norm
from tqdm import tqdm

from pacsmr.errors import NumericalError, UnidentifiedDirectionsError, ValidationError
from pacsmr.estimators import SELECTION_THRESHOLD, fit_divw
from pacsmr.matrix_core import instrument_strength, symmetrize
from pacsmr.model_selection import DEFAULT_SELECTION, SelectionConfig, fit_tuned
from pacsmr.summary_data import DesignQuantities, build_design
from pacsmr.thinning import sub_seed, thin_two_fold

logger = logging.getLogger(__name__)

DEFAULT_PRECISION = 1e-3


# =============================================================================
# Group structures
# =============================================================================

@dataclass(frozen=True)
class SignalGroup:
    members: tuple
    signs: tuple
    magnitude: float

    @property
    def group_sign(self):
        return self.signs[0]


@dataclass(frozen=True, eq=False)
class SignalGroupSet:
    groups: tuple
    nonmembers: tuple
    k: int

    @property
    def n_groups(self):
        return len(self.groups)

    @cached_property
    def matrices(self):
        return build_group_matrices(self, self.k)

    @property
    def c_g(self):
        return self.matrices[0]

    @property
    def g_mat(self):
        return self.matrices[1]

    def labels(self):
        """Per exposure: 0 if not selected, else +-(l+1) relative to the group sign."""
        labels = [0] * self.k
        for l, group in enumerate(self.groups):
            for member, sign in zip(group.members, group.signs):
                labels[member] = (l + 1) * group.group_sign * sign
        return labels

    def label_string(self):
        return "|".join(str(v) for v in self.labels())

    def same_group(self):
        """K x K boolean matrix: True where both exposures sit in one group."""
        ids = np.array([abs(v) for v in self.labels()])
        return (ids[:, None] == ids[None, :]) & (ids[:, None] > 0)

    def to_dict(self, exposure_names=None):
        names = list(exposure_names) if exposure_names is not None else list(range(self.k))
        return {
            "labels": self.labels(),
            "groups": [
                {
                    "members": [names[m] for m in g.members],
                    "signs": list(g.signs),
                    "magnitude": g.magnitude,
                }
                for g in self.groups
            ],
            "nonmembers": [names[m] for m in self.nonmembers],
        }


def extract_signal_groups(fit, precision=DEFAULT_PRECISION, threshold=SELECTION_THRESHOLD):
    """Partition the selected exposures of a fit (or a beta vector) by |beta| within `precision`."""
    beta = np.asarray(getattr(fit, "beta", fit), dtype=float).reshape(-1)
    k = beta.size
    selected = np.flatnonzero(np.abs(beta) > threshold)
    order = selected[np.argsort(np.abs(beta[selected]), kind="stable")]

    clusters = []
    for idx in order:
        if clusters and abs(beta[idx]) - abs(beta[clusters[-1][0]]) <= precision:
            clusters[-1].append(idx)
        else:
            clusters.append([idx])

    groups = []
    for members in clusters:
        members = sorted(int(m) for m in members)
        signs = tuple(int(np.sign(beta[m])) for m in members)
        groups.append(SignalGroup(tuple(members), signs, float(np.mean(np.abs(beta[members])))))
    groups.sort(key=lambda g: g.members[0])
    nonmembers = tuple(int(i) for i in range(k) if abs(beta[i]) <= threshold)
    return SignalGroupSet(tuple(groups), nonmembers, k)


def build_group_matrices(sgs, k=None):
    """(C_g, G), each L x K."""
    k = sgs.k if k is None else k
    c_g = np.zeros((sgs.n_groups, k))
    g_mat = np.zeros((sgs.n_groups, k))
    for l, group in enumerate(sgs.groups):
        for member, sign in zip(group.members, group.signs):
            g_mat[l, member] = group.group_sign * sign
            c_g[l, member] = group.group_sign * sign / len(group.members)
    return c_g, g_mat


# =============================================================================
# Grouped inference
# =============================================================================

@dataclass(frozen=True)
class GroupInference:
    groups: SignalGroupSet
    group_estimates: np.ndarray
    variance: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    p_values: np.ndarray
    level: float
    strength: object = None

    @property
    def se(self):
        return np.sqrt(np.maximum(np.diag(self.variance), 0.0))

    def exposure_estimates(self):
        """Group estimates mapped back to exposures (G' beta_g)."""
        return self.groups.g_mat.T @ self.group_estimates

    def to_frame(self, exposure_names=None):
        names = list(exposure_names) if exposure_names is not None else [
            str(i) for i in range(self.groups.k)]
        rows = []
        for l, group in enumerate(self.groups.groups):
            members = ";".join(
                ("-" if group.group_sign * s < 0 else "") + names[m]
                for m, s in zip(group.members, group.signs))
            rows.append({
                "group": l + 1,
                "members": members,
                "estimate": self.group_estimates[l],
                "se": self.se[l],
                "ci_low": self.ci_low[l],
                "ci_high": self.ci_high[l],
                "p_value": self.p_values[l],
            })
        return pd.DataFrame(rows, columns=["group", "members", "estimate", "se",
                                           "ci_low", "ci_high", "p_value"])


def group_design(dq, g_mat):
    """Design quantities of the grouped exposures Pi G' with V_jg = G Sigma_Xj G' s_Yj^-2."""
    sigma_g = np.einsum("lk,jkm,nm->jln", g_mat, dq.sigma_xj, g_mat)
    sigma_g = (sigma_g + np.swapaxes(sigma_g, 1, 2)) / 2
    v_g = symmetrize(np.einsum("j,jkl->kl", dq.weights, sigma_g))
    return DesignQuantities(dq.pi_hat @ g_mat.T, dq.gamma_vec, dq.weights, v_g, sigma_g)


def group_estimand(pi, gamma, weights, g_mat):
    """Working-model target (Pi_g' W Pi_g)^-1 Pi_g' W Gamma from population quantities."""
    pi_g = np.asarray(pi) @ np.asarray(g_mat).T
    weights = np.asarray(weights, dtype=float)
    lhs = pi_g.T @ (weights[:, None] * pi_g)
    return np.linalg.solve(lhs, pi_g.T @ (weights * np.asarray(gamma)))


def wald_summary(estimates, variance, level):
    se = np.sqrt(np.maximum(np.diag(variance), 0.0))
    z = norm.ppf(1 - (1 - level) / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(se > 0, estimates / se, np.inf)
    return estimates - z * se, estimates + z * se, 2 * norm.sf(np.abs(stat))


def grouped_inference(ds, sgs, level=0.95):
    """Debiased IVW with sandwich variance on the grouped design."""
    if sgs.n_groups < 1:
        raise ValidationError("grouped inference needs at least one signal group")
    if not 0 < level < 1:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    dq_g = group_design(build_design(ds), sgs.g_mat)
    strength = instrument_strength(dq_g, whiten=True)
    try:
        fit = fit_divw(dq_g, with_variance=True)
    except UnidentifiedDirectionsError as exc:
        raise UnidentifiedDirectionsError(
            f"grouped design is near-singular (grouped instrument strength parameter "
            f"{strength.is_param:.3g}): {exc}", directions=exc.directions) from exc
    ci_low, ci_high, p_values = wald_summary(fit.beta, fit.variance, level)
    return GroupInference(sgs, fit.beta, fit.variance, ci_low, ci_high, p_values, level, strength)


# =============================================================================
# Post-selection pipeline
# =============================================================================

@dataclass(frozen=True)
class PipelineConfig:
    selection: SelectionConfig = DEFAULT_SELECTION
    method: str = "pacs"
    precision: float = DEFAULT_PRECISION
    level: float = 0.95


DEFAULT_PIPELINE = PipelineConfig()


@dataclass(frozen=True)
class PipelineResult:
    status: str
    selection: SignalGroupSet
    inference: GroupInference = None
    fit: object = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, exposure_names=None):
        out = {
            "status": self.status,
            "selection": self.selection.to_dict(exposure_names),
            "fit": None if self.fit is None else self.fit.to_dict(exposure_names),
            "diagnostics": self.diagnostics,
            "inference": None,
        }
        if self.inference is not None:
            out["inference"] = self.inference.to_frame(exposure_names).to_dict(orient="records")
        return out


def _strength_summary(ds):
    dq = build_design(ds)
    raw = instrument_strength(dq)
    white = instrument_strength(dq, whiten=True)
    return {"raw": raw.to_dict(), "whitened": white.to_dict()}


def post_selection_pipeline(ds, config=DEFAULT_PIPELINE, seed=0):
    """
    Thin into D_select / D_infer, tune and fit on D_select, extract signal
    groups, then run grouped inference on D_infer.
    """
    reps = thin_two_fold(ds, sub_seed(seed, 0))
    d_select, d_infer = reps[0], reps[1]
    tuned = fit_tuned(d_select, config.method, config.selection, seed=sub_seed(seed, 1))
    sgs = extract_signal_groups(tuned.fit, config.precision)
    diagnostics = {
        "select_strength": _strength_summary(d_select),
        "infer_strength": _strength_summary(d_infer),
        "lambda": tuned.fit.lam,
        "tau": tuned.fit.tau,
        "phi": tuned.phi,
    }
    if sgs.n_groups == 0:
        logger.info("no exposure selected; inference skipped")
        return PipelineResult("empty_selection", sgs, None, tuned.fit, diagnostics)
    try:
        inference = grouped_inference(d_infer, sgs, config.level)
    except NumericalError as exc:
        logger.warning("grouped inference failed: %s", exc)
        diagnostics["error"] = str(exc)
        return PipelineResult("inference_failed", sgs, None, tuned.fit, diagnostics)
    diagnostics["grouped_strength"] = inference.strength.to_dict()
    return PipelineResult("ok", sgs, inference, tuned.fit, diagnostics)


# =============================================================================
# Stability over repeated thinning
# =============================================================================

@dataclass(frozen=True)
class StabilitySummary:
    coassignment: pd.DataFrame
    runs: pd.DataFrame
    significance: pd.DataFrame
    grouping_frequencies: pd.DataFrame
    most_frequent: dict

    @property
    def distance(self):
        """1 - co-assignment frequency, ready for hierarchical clustering."""
        return 1.0 - self.coassignment


def _pipeline_task(args):
    ds, config, seed = args
    return post_selection_pipeline(ds, config, seed)


def single_threaded(config):
    """The same pipeline with cross-validation kept in-process, for use inside a worker pool."""
    return replace(config, selection=replace(config.selection, threads=1))


def run_pipelines(ds, config, seeds, threads=1, progress=False):
    pooled = threads is not None and threads > 1 and len(seeds) > 1
    if pooled:
        config = single_threaded(config)
    tasks = [(ds, config, s) for s in seeds]
    if pooled:
        with ProcessPoolExecutor(max_workers=threads) as executor:
            return list(tqdm(executor.map(_pipeline_task, tasks), total=len(tasks),
                             disable=not progress, desc="thinning runs"))
    return [_pipeline_task(t) for t in tqdm(tasks, disable=not progress, desc="thinning runs")]


def _median_grouping(results, label, level, aggregate):
    chosen = [r for r in results if r.selection.label_string() == label and r.inference is not None]
    if not chosen:
        return {"labels": label, "runs": 0}
    estimates = np.median(np.stack([r.inference.group_estimates for r in chosen]), axis=0)
    ses = np.median(np.stack([r.inference.se for r in chosen]), axis=0)
    summary = {
        "labels": label,
        "runs": len(chosen),
        "median_estimate": estimates.tolist(),
        "median_se": ses.tolist(),
    }
    if aggregate == "median":
        logger.warning("median-aggregated intervals combine dependent thinning runs; "
                       "their joint validity is not established")
        ci_low, ci_high, p_values = wald_summary(estimates, np.diag(ses ** 2), level)
        summary.update(ci_low=ci_low.tolist(), ci_high=ci_high.tolist(), p_values=p_values.tolist())
    return summary


def stability_summary(ds, config=DEFAULT_PIPELINE, repeats=100, seed=0, threads=1,
                      aggregate="descriptive", alpha=0.05, progress=False):
    """
    Run the pipeline `repeats` times with distinct sub-seeds and summarize
    co-assignment, per-run estimates, significance counts and the most
    frequent grouping.
    """
    if repeats < 2:
        raise ValidationError(f"stability summary needs at least 2 repeats, got {repeats}")
    if aggregate not in ("descriptive", "median"):
        raise ValidationError(f"unknown aggregation '{aggregate}'")
    names = list(ds.exposure_names)
    results = run_pipelines(ds, config, [sub_seed(seed, r) for r in range(repeats)],
                            threads, progress)

    together = np.zeros((ds.k, ds.k))
    significant = np.zeros(ds.k, dtype=int)
    rows = []
    for run, result in enumerate(results):
        together += result.selection.same_group()
        labels = result.selection.labels()
        estimates = np.zeros(ds.k)
        pvals = np.full(ds.k, np.nan)
        if result.inference is not None:
            estimates = result.inference.exposure_estimates()
            group_p = result.inference.p_values
            for k, label in enumerate(labels):
                if label:
                    pvals[k] = group_p[abs(label) - 1]
            significant += np.nan_to_num(pvals, nan=1.0) < alpha
        for k in range(ds.k):
            rows.append({"run": run, "exposure": names[k], "label": labels[k],
                         "estimate": estimates[k], "p_value": pvals[k], "status": result.status})

    counts = Counter(r.selection.label_string() for r in results)
    ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    frequencies = pd.DataFrame(
        [{"labels": label, "count": n, "frequency": n / repeats} for label, n in ordered])
    most_frequent = _median_grouping(results, ordered[0][0], config.level, aggregate)
    most_frequent["frequency"] = ordered[0][1] / repeats

    return StabilitySummary(
        coassignment=pd.DataFrame(together / repeats, index=names, columns=names),
        runs=pd.DataFrame(rows),
        significance=pd.DataFrame({"exposure": names, "significant_runs": significant,
                                   "frequency": significant / repeats}),
        grouping_frequencies=frequencies,
        most_frequent=most_frequent,
    )
